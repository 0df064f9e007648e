use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{io_err, Result, TrainEvalError};
use crate::baselines::{gpp_umi_pathloss, GppConfig};
use crate::extract::align_and_extract;
use crate::model::{ModelInput, SurrogateModel};
use crate::oracle::{los_clear, Oracle, OracleConfig, OracleError};
use crate::scene::{distance_3d, Point3, Scene};

/// Grid value of building pixels and of pixels without a prediction.
pub const MASKED_SENTINEL_DB: f64 = -999.0;
const CLAMP_DB: (f64, f64) = (60.0, 160.0);

/// Anything that predicts the path loss of a batch of links in one scene.
pub trait LinkPredictor: Sync {
    fn name(&self) -> &str;

    /// One prediction per receiver; `None` where the link is undefined (the
    /// receiver coincides with the transmitter) or in outage.
    fn predict_links(&self, scene: &Scene, tx: &Point3, rxs: &[Point3])
        -> Result<Vec<Option<f64>>>;
}

pub struct OraclePredictor {
    pub cfg: OracleConfig,
}

impl LinkPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict_links(
        &self,
        scene: &Scene,
        tx: &Point3,
        rxs: &[Point3],
    ) -> Result<Vec<Option<f64>>> {
        let oracle = Oracle::new(scene, self.cfg.clone())?;
        rxs.par_iter()
            .map(|rx| match oracle.path_loss(tx, rx) {
                Ok(o) => Ok(o.pathloss_db()),
                Err(OracleError::NonPositive { .. }) => Ok(None),
                Err(e) => Err(e.into()),
            })
            .collect()
    }
}

pub struct SurrogatePredictor<'m> {
    pub model: &'m SurrogateModel<f32>,
    pub pad_patches: usize,
}

impl LinkPredictor for SurrogatePredictor<'_> {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn predict_links(
        &self,
        scene: &Scene,
        tx: &Point3,
        rxs: &[Point3],
    ) -> Result<Vec<Option<f64>>> {
        let p = self.model.config.patch_size;
        let inputs: Vec<Option<ModelInput>> = rxs
            .par_iter()
            .map(|rx| {
                align_and_extract(scene, tx, rx, p, self.pad_patches)
                    .ok()
                    .map(|e| ModelInput::from_extract(&e))
            })
            .collect();
        let valid: Vec<ModelInput> = inputs.iter().flatten().cloned().collect();
        let mut pred = self.model.predict(&valid, 64)?.into_iter();
        Ok(inputs
            .iter()
            .map(|x| x.as_ref().and_then(|_| pred.next()))
            .collect())
    }
}

/// 3GPP UMi with the geometric LOS flag of the scene.
pub struct GppPredictor {
    pub cfg: GppConfig,
}

impl LinkPredictor for GppPredictor {
    fn name(&self) -> &str {
        "3gpp"
    }

    fn predict_links(
        &self,
        scene: &Scene,
        tx: &Point3,
        rxs: &[Point3],
    ) -> Result<Vec<Option<f64>>> {
        rxs.par_iter()
            .map(|rx| {
                let d2 = tx.distance_2d(rx);
                if d2 == 0.0 {
                    return Ok(None);
                }
                let los = los_clear(scene, tx, rx)?;
                Ok(gpp_umi_pathloss(d2, distance_3d(tx, rx), &self.cfg, los).ok())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenderParams {
    pub tx: Point3,
    pub resolution_m: f64,
    pub extent_m: f64,
    pub rx_height_m: f64,
}

/// A square grid of predictions centred on the transmitter. Row 0 is the top
/// (maximum y).
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    pub predictor: String,
    pub params: RenderParams,
    pub size: usize,
    pub values_db: Vec<f64>,
    pub building: Vec<bool>,
    /// Foliage height relative to the scene maximum.
    pub foliage: Vec<f64>,
    /// Receiver positions in the coordinates of the input scene.
    pub receivers: Vec<Point3>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    predictor: &'a str,
    tx: [f64; 3],
    extent_m: f64,
    resolution_m: f64,
    rx_height_m: f64,
    size_px: usize,
    clamp_db: [f64; 2],
    sentinel_db: f64,
    row0: &'static str,
}

/// Copy of `scene` enlarged with open space so it covers the rectangle
/// `[x0, x1] × [y0, y1]`, plus the metric shift applied to coordinates.
fn pad_to_cover(scene: &Scene, x0: f64, y0: f64, x1: f64, y1: f64) -> (Scene, f64, f64) {
    let res = scene.resolution_m;
    let left = (-x0 / res).ceil().max(0.0) as usize;
    let bottom = (-y0 / res).ceil().max(0.0) as usize;
    let right = ((x1 - scene.width_m()) / res).ceil().max(0.0) as usize;
    let top = ((y1 - scene.height_m()) / res).ceil().max(0.0) as usize;
    if left + bottom + right + top == 0 {
        return (scene.clone(), 0.0, 0.0);
    }
    let (w, h) = (
        scene.width_px + left + right,
        scene.height_px + bottom + top,
    );
    let mut out = Scene::empty(scene.id.clone(), w, h);
    out.resolution_m = res;
    out.foliage_max_m = scene.foliage_max_m;
    for r in 0..scene.height_px {
        for c in 0..scene.width_px {
            let (src, dst) = (scene.index(c, r), out.index(c + left, r + bottom));
            out.building_mask[dst] = scene.building_mask[src];
            out.building_height_m[dst] = scene.building_height_m[src];
            out.foliage_height_m[dst] = scene.foliage_height_m[src];
        }
    }
    (out, left as f64 * res, bottom as f64 * res)
}

/// Predict every pixel centre of a square map around the transmitter.
/// Building pixels and undefined links hold [`MASKED_SENTINEL_DB`]. Parts of
/// the map outside the scene are treated as open space.
pub fn render_radiomap(
    scene: &Scene,
    predictor: &dyn LinkPredictor,
    params: RenderParams,
) -> Result<RadioMap> {
    let res = params.resolution_m;
    if !(res > 0.0 && params.extent_m >= res && res.is_finite() && params.extent_m.is_finite()) {
        return Err(TrainEvalError::Invalid(format!(
            "need 0 < resolution <= extent, got {res} and {}",
            params.extent_m
        )));
    }
    let n = (params.extent_m / res).round() as usize;
    let half = n as f64 / 2.0;
    let tx = params.tx;
    let receivers: Vec<Point3> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            Point3::new(
                tx.x + (j as f64 + 0.5 - half) * res,
                tx.y + (half - i as f64 - 0.5) * res,
                params.rx_height_m,
            )
        })
        .collect();
    let span = half * res;
    let (padded, dx, dy) = pad_to_cover(scene, tx.x - span, tx.y - span, tx.x + span, tx.y + span);
    let shift = |p: &Point3| Point3::new(p.x + dx, p.y + dy, p.z);
    let stx = shift(&tx);
    if padded.is_building_at(stx.x, stx.y) {
        return Err(OracleError::InsideBuilding { x: tx.x, y: tx.y }.into());
    }
    let shifted: Vec<Point3> = receivers.iter().map(shift).collect();
    let building: Vec<bool> = shifted
        .iter()
        .map(|p| padded.is_building_at(p.x, p.y))
        .collect();
    let foliage: Vec<f64> = shifted
        .iter()
        .map(|p| {
            padded
                .pixel_of(p.x, p.y)
                .map_or(0.0, |(c, r)| padded.foliage_at(c, r) / padded.foliage_max_m)
        })
        .collect();
    let open: Vec<Point3> = shifted
        .iter()
        .zip(&building)
        .filter(|(_, &b)| !b)
        .map(|(p, _)| *p)
        .collect();
    let mut pred = predictor.predict_links(&padded, &stx, &open)?.into_iter();
    let values_db = building
        .iter()
        .map(|&b| if b { None } else { pred.next().flatten() })
        .map(|v| v.unwrap_or(MASKED_SENTINEL_DB))
        .collect();
    Ok(RadioMap {
        predictor: predictor.name().to_string(),
        params,
        size: n,
        values_db,
        building,
        foliage,
        receivers,
    })
}

fn gray(db: f64) -> u8 {
    if db == MASKED_SENTINEL_DB {
        return 0;
    }
    let (lo, hi) = CLAMP_DB;
    ((hi - db.clamp(lo, hi)) / (hi - lo) * 255.0).round() as u8
}

impl RadioMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values_db.len() * 10);
        for row in self.values_db.chunks(self.size) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v:.4}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// 8-bit grayscale (P5): 60 dB is white, 160 dB and beyond black, masked
    /// pixels black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.values_db.iter().map(|&v| gray(v)));
        out
    }

    /// Colour (P6) image: the grayscale map with buildings in red and foliage
    /// tinted green in proportion to its height.
    pub fn to_overlay_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        for k in 0..self.values_db.len() {
            if self.building[k] {
                out.extend([200, 40, 40]);
                continue;
            }
            let g = gray(self.values_db[k]) as f64;
            let f = self.foliage[k].clamp(0.0, 1.0) * 0.6;
            out.extend([
                (g * (1.0 - f)).round() as u8,
                (g * (1.0 - f) + 255.0 * f).round() as u8,
                (g * (1.0 - f)).round() as u8,
            ]);
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        let p = &self.params;
        let s = Sidecar {
            predictor: &self.predictor,
            tx: [p.tx.x, p.tx.y, p.tx.z],
            extent_m: p.extent_m,
            resolution_m: p.resolution_m,
            rx_height_m: p.rx_height_m,
            size_px: self.size,
            clamp_db: [CLAMP_DB.0, CLAMP_DB.1],
            sentinel_db: MASKED_SENTINEL_DB,
            row0: "top (maximum y)",
        };
        serde_json::to_string_pretty(&s).expect("sidecar serializes") + "\n"
    }

    /// Write `PREFIX.csv`, `PREFIX.pgm`, `PREFIX_overlay.ppm` and
    /// `PREFIX.json`; returns the paths in that order.
    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let prefix = prefix.as_ref().as_os_str().to_owned();
        let path = |suffix: &str| {
            let mut s = prefix.clone();
            s.push(suffix);
            PathBuf::from(s)
        };
        let files = [
            (path(".csv"), self.to_csv().into_bytes()),
            (path(".pgm"), self.to_pgm()),
            (path("_overlay.ppm"), self.to_overlay_ppm()),
            (path(".json"), self.sidecar_json().into_bytes()),
        ];
        let mut out = Vec::new();
        for (p, bytes) in files {
            fs::write(&p, bytes).map_err(io_err(&p))?;
            out.push(p);
        }
        Ok(out)
    }
}
