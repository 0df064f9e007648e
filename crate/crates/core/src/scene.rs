//! Scenes, link records and the on-disk formats shared by the rest of the crate.
//!
//! A scene is a raster of square pixels on flat ground. Pixel `(col, row)`
//! covers `x ∈ [col·res, (col+1)·res)`, `y ∈ [row·res, (row+1)·res)`; row 0 is
//! the minimum-y row. Three layers are carried: a binary building mask,
//! building heights (used by the oracle only) and foliage heights.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCENE_MAGIC: &str = "PLSCENE 1";
pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FOLIAGE_MAX_M: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {layer} value {value} at row {row}, col {col} out of range ({msg})")]
    Range {
        line: usize,
        layer: &'static str,
        row: usize,
        col: usize,
        value: f64,
        msg: String,
    },
    #[error("invalid scene: {0}")]
    Invariant(String),
    #[error("line {line}: malformed link record: {msg}")]
    Record { line: usize, msg: String },
}

fn io_err(path: &Path, source: io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A point in the local metric frame; `z` is height above flat ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance_2d(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point3, t: f64) -> Point3 {
        Point3::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
            self.z + (other.z - self.z) * t,
        )
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

/// Euclidean 3-D distance in meters.
pub fn distance_3d(a: &Point3, b: &Point3) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let dz = b.z - a.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width_px: usize,
    pub height_px: usize,
    pub resolution_m: f64,
    pub foliage_max_m: f64,
    /// Row-major, row 0 = minimum y.
    pub building_mask: Vec<u8>,
    pub building_height_m: Vec<f64>,
    pub foliage_height_m: Vec<f64>,
}

impl Scene {
    /// An all-open scene with no buildings and no foliage.
    pub fn empty(id: impl Into<String>, width_px: usize, height_px: usize) -> Self {
        let n = width_px * height_px;
        Scene {
            id: id.into(),
            width_px,
            height_px,
            resolution_m: 1.0,
            foliage_max_m: DEFAULT_FOLIAGE_MAX_M,
            building_mask: vec![0; n],
            building_height_m: vec![0.0; n],
            foliage_height_m: vec![0.0; n],
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width_px + col
    }

    #[inline]
    pub fn is_building(&self, col: usize, row: usize) -> bool {
        self.building_mask[self.index(col, row)] != 0
    }

    #[inline]
    pub fn foliage_at(&self, col: usize, row: usize) -> f64 {
        self.foliage_height_m[self.index(col, row)]
    }

    pub fn width_m(&self) -> f64 {
        self.width_px as f64 * self.resolution_m
    }

    pub fn height_m(&self) -> f64 {
        self.height_px as f64 * self.resolution_m
    }

    pub fn contains_2d(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.width_m() && y <= self.height_m()
    }

    /// Pixel containing a metric position, if inside the raster.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = (x / self.resolution_m).floor();
        let r = (y / self.resolution_m).floor();
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (c, r) = (c as usize, r as usize);
        (c < self.width_px && r < self.height_px).then_some((c, r))
    }

    /// Whether a metric position falls inside a building pixel.
    pub fn is_building_at(&self, x: f64, y: f64) -> bool {
        self.pixel_of(x, y)
            .is_some_and(|(c, r)| self.is_building(c, r))
    }

    pub fn building_fraction(&self) -> f64 {
        let n = self.building_mask.iter().filter(|&&m| m != 0).count();
        n as f64 / self.building_mask.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let inv = |m: String| Err(SceneError::Invariant(m));
        if self.width_px == 0 || self.height_px == 0 {
            return inv("dimensions must be positive".into());
        }
        if !(self.resolution_m.is_finite() && self.resolution_m > 0.0) {
            return inv(format!("resolution {} must be positive", self.resolution_m));
        }
        if !(self.foliage_max_m.is_finite() && self.foliage_max_m > 0.0) {
            return inv(format!(
                "foliage_max {} must be positive",
                self.foliage_max_m
            ));
        }
        let n = self.width_px * self.height_px;
        if self.building_mask.len() != n
            || self.building_height_m.len() != n
            || self.foliage_height_m.len() != n
        {
            return inv(format!(
                "layer lengths do not match {}x{}",
                self.width_px, self.height_px
            ));
        }
        for i in 0..n {
            let (row, col) = (i / self.width_px, i % self.width_px);
            let m = self.building_mask[i];
            let h = self.building_height_m[i];
            let f = self.foliage_height_m[i];
            if m > 1 {
                return inv(format!("mask value {m} at row {row}, col {col}"));
            }
            if !(h.is_finite() && h >= 0.0) || ((h > 0.0) != (m == 1)) {
                return inv(format!(
                    "building height {h} inconsistent with mask {m} at row {row}, col {col}"
                ));
            }
            if !(f.is_finite() && (0.0..=self.foliage_max_m).contains(&f)) {
                return inv(format!(
                    "foliage height {f} out of range at row {row}, col {col}"
                ));
            }
            if m == 1 && f > 0.0 {
                return inv(format!("foliage overlaps building at row {row}, col {col}"));
            }
        }
        Ok(())
    }

    /// Serialize to the text scene format. Fails if invariants do not hold.
    pub fn to_text(&self) -> Result<String, SceneError> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(SCENE_MAGIC);
        out.push('\n');
        writeln!(
            out,
            "{} {} {:?} {:?}",
            self.width_px, self.height_px, self.resolution_m, self.foliage_max_m
        )
        .unwrap();
        out.push_str("LAYERS mask heights foliage\n");
        write_int_layer(&mut out, &self.building_mask, self.width_px);
        write_real_layer(&mut out, &self.building_height_m, self.width_px);
        write_real_layer(&mut out, &self.foliage_height_m, self.width_px);
        Ok(out)
    }

    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Scene, SceneError> {
        parse_scene(id.into(), text)
    }
}

pub(crate) fn write_int_layer(out: &mut String, layer: &[u8], width: usize) {
    for row in layer.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
}

pub(crate) fn write_real_layer(out: &mut String, layer: &[f64], width: usize) {
    for row in layer.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // Debug formatting is the shortest representation that round-trips.
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
}

fn parse_scene(id: String, text: &str) -> Result<Scene, SceneError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let perr = |line: usize, msg: String| SceneError::Parse { line, msg };

    let (ln, magic) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    if magic.trim_end() != SCENE_MAGIC {
        return Err(perr(
            ln,
            format!("expected header `{SCENE_MAGIC}`, found `{magic}`"),
        ));
    }
    let (ln, dims) = lines
        .next()
        .ok_or_else(|| perr(2, "missing dimension line".into()))?;
    let fields: Vec<&str> = dims.split(' ').collect();
    if fields.len() != 4 {
        return Err(perr(
            ln,
            format!("expected 4 header fields, found {}", fields.len()),
        ));
    }
    let width: usize = fields[0]
        .parse()
        .map_err(|_| perr(ln, format!("bad width `{}`", fields[0])))?;
    let height: usize = fields[1]
        .parse()
        .map_err(|_| perr(ln, format!("bad height `{}`", fields[1])))?;
    let res: f64 = fields[2]
        .parse()
        .map_err(|_| perr(ln, format!("bad resolution `{}`", fields[2])))?;
    let fmax: f64 = fields[3]
        .parse()
        .map_err(|_| perr(ln, format!("bad foliage max `{}`", fields[3])))?;
    if width == 0 || height == 0 {
        return Err(perr(ln, "dimensions must be positive".into()));
    }
    if !(res.is_finite() && res > 0.0) || !(fmax.is_finite() && fmax > 0.0) {
        return Err(perr(
            ln,
            "resolution and foliage max must be positive".into(),
        ));
    }
    let (ln, layers) = lines
        .next()
        .ok_or_else(|| perr(3, "missing LAYERS line".into()))?;
    if layers.trim_end() != "LAYERS mask heights foliage" {
        return Err(perr(ln, format!("unexpected layer declaration `{layers}`")));
    }

    let n = width * height;
    let mut mask = Vec::with_capacity(n);
    let mut heights = Vec::with_capacity(n);
    let mut foliage = Vec::with_capacity(n);

    for (li, layer) in ["mask", "heights", "foliage"].into_iter().enumerate() {
        for row in 0..height {
            let (ln, line) = lines.next().ok_or_else(|| {
                perr(
                    4 + li * height + row,
                    format!("{layer} layer truncated at row {row}"),
                )
            })?;
            let cells: Vec<&str> = line.split(' ').collect();
            if cells.len() != width {
                return Err(perr(
                    ln,
                    format!(
                        "{layer} row {row} has {} cells, expected {width}",
                        cells.len()
                    ),
                ));
            }
            for (col, cell) in cells.iter().enumerate() {
                let range = |value: f64, msg: String| SceneError::Range {
                    line: ln,
                    layer,
                    row,
                    col,
                    value,
                    msg,
                };
                match layer {
                    "mask" => {
                        let v: u8 = cell.parse().map_err(|_| {
                            perr(ln, format!("bad mask cell `{cell}` at col {col}"))
                        })?;
                        if v > 1 {
                            return Err(range(v as f64, "mask must be 0 or 1".into()));
                        }
                        mask.push(v);
                    }
                    _ => {
                        let v: f64 = cell.parse().map_err(|_| {
                            perr(ln, format!("bad {layer} cell `{cell}` at col {col}"))
                        })?;
                        if !v.is_finite() || v < 0.0 {
                            return Err(range(v, "must be finite and non-negative".into()));
                        }
                        if layer == "heights" {
                            let m = mask[row * width + col];
                            if (v > 0.0) != (m == 1) {
                                return Err(range(v, format!("inconsistent with mask value {m}")));
                            }
                            heights.push(v);
                        } else {
                            if v > fmax {
                                return Err(range(v, format!("exceeds foliage max {fmax:?}")));
                            }
                            if v > 0.0 && mask[row * width + col] == 1 {
                                return Err(range(v, "foliage on a building pixel".into()));
                            }
                            foliage.push(v);
                        }
                    }
                }
            }
        }
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(perr(ln, format!("trailing content `{extra}`")));
    }
    Ok(Scene {
        id,
        width_px: width,
        height_px: height,
        resolution_m: res,
        foliage_max_m: fmax,
        building_mask: mask,
        building_height_m: heights,
        foliage_height_m: foliage,
    })
}

/// Load a scene file; the scene id is the file stem.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_scene(id, &text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    let text = scene.to_text()?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// One transmitter-receiver pair with its ground-truth path loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub scene_id: String,
    pub tx: Point3,
    pub rx: Point3,
    pub distance_3d_m: f64,
    pub pathloss_db: f64,
    pub los: bool,
}

impl LinkRecord {
    pub fn distance_2d_m(&self) -> f64 {
        self.tx.distance_2d(&self.rx)
    }

    /// Re-check the record's distance and free-space-bound invariants.
    pub fn validate(&self, carrier_hz: f64) -> Result<(), String> {
        let d = distance_3d(&self.tx, &self.rx);
        if (d - self.distance_3d_m).abs() > 1e-9 * d.max(1.0) {
            return Err(format!(
                "distance {} does not match endpoints ({d})",
                self.distance_3d_m
            ));
        }
        let free = crate::oracle::fspl_db(d, carrier_hz).map_err(|e| e.to_string())?;
        if self.pathloss_db < free - 1e-6 {
            return Err(format!(
                "path loss {} below free space {free}",
                self.pathloss_db
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValKnown,
    TestKnown,
    ValNovel,
    TestNovel,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::Train,
        SplitName::ValKnown,
        SplitName::TestKnown,
        SplitName::ValNovel,
        SplitName::TestNovel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValKnown => "val_known",
            SplitName::TestKnown => "test_known",
            SplitName::ValNovel => "val_novel",
            SplitName::TestNovel => "test_novel",
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, SplitName::ValNovel | SplitName::TestNovel)
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub records: Vec<LinkRecord>,
}

/// Serialize records as JSON lines.
pub fn records_to_jsonl(records: &[LinkRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("link record serializes"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<LinkRecord>, SceneError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SceneError::Record {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn save_records(records: &[LinkRecord], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<LinkRecord>, SceneError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SceneError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Load every `*.scene` file in a directory, sorted by id.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>, SceneError> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "scene"))
        .collect();
    paths.sort();
    paths.iter().map(load_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_text_round_trip() {
        let text = "PLSCENE 1\n4 4 1.0 30.0\nLAYERS mask heights foliage\n\
                    0 0 0 0\n0 0 0 0\n0 0 0 0\n0 0 0 0\n\
                    0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n\
                    0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n0.0 0.0 0.0 0.0\n";
        let s = Scene::from_text("e", text).unwrap();
        assert_eq!(s, Scene::empty("e", 4, 4));
        assert_eq!(s.to_text().unwrap(), text);
    }

    #[test]
    fn single_building_cell_format() {
        let mut s = Scene::empty("one", 1, 1);
        s.building_mask[0] = 1;
        s.building_height_m[0] = 12.0;
        let text = s.to_text().unwrap();
        assert_eq!(
            text,
            "PLSCENE 1\n1 1 1.0 30.0\nLAYERS mask heights foliage\n1\n12.0\n0.0\n"
        );
    }

    #[test]
    fn foliage_over_max_names_row_and_col() {
        let text = "PLSCENE 1\n2 2 1.0 30.0\nLAYERS mask heights foliage\n\
                    0 0\n0 0\n0.0 0.0\n0.0 0.0\n0.0 0.0\n0.0 31.0\n";
        match Scene::from_text("x", text) {
            Err(SceneError::Range {
                line,
                row,
                col,
                layer,
                ..
            }) => {
                assert_eq!((line, row, col, layer), (9, 1, 1, "foliage"));
            }
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_dimension_mismatch() {
        assert!(matches!(
            Scene::from_text("x", "PLSCENE 2\n"),
            Err(SceneError::Parse { line: 1, .. })
        ));
        let short_row =
            "PLSCENE 1\n2 1 1.0 30.0\nLAYERS mask heights foliage\n0\n0.0 0.0\n0.0 0.0\n";
        assert!(matches!(
            Scene::from_text("x", short_row),
            Err(SceneError::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn invariant_gate_rejects_before_write() {
        let mut s = Scene::empty("bad", 2, 2);
        s.building_mask[0] = 1; // no height
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.scene");
        assert!(matches!(
            save_scene(&s, &path),
            Err(SceneError::Invariant(_))
        ));
        assert!(!path.exists());
    }

    #[test]
    fn distance_examples() {
        let a = Point3::new(0.0, 0.0, 9.0);
        assert_eq!(distance_3d(&a, &a), 0.0);
        let b = Point3::new(0.0, 100.0, 1.5);
        assert!((distance_3d(&a, &b) - (100.0f64.powi(2) + 7.5f64.powi(2)).sqrt()).abs() < 1e-12);
        assert!((distance_3d(&a, &b) - 100.28).abs() < 0.005);
        assert_eq!(
            distance_3d(&Point3::new(0.0, 0.0, 0.0), &Point3::new(3.0, 4.0, 0.0)),
            5.0
        );
    }

    #[test]
    fn record_json_shape() {
        let r = LinkRecord {
            scene_id: "s".into(),
            tx: Point3::new(1.0, 2.0, 9.0),
            rx: Point3::new(3.5, 4.0, 1.5),
            distance_3d_m: 1.0,
            pathloss_db: 70.25,
            los: true,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"scene_id":"s","tx":[1.0,2.0,9.0],"rx":[3.5,4.0,1.5],"distance_3d_m":1.0,"pathloss_db":70.25,"los":true}"#
        );
        assert_eq!(records_from_jsonl(&line).unwrap(), vec![r]);
    }
}
