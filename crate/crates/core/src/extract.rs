//! Transmitter-aligned map extraction.
//!
//! The map is rotated about the transmitter so the receiver sits straight
//! above it, then cropped to a whole number of `P × P` patches. The
//! transmitter pixel is the center pixel of its patch; the patch grid is
//! anchored there, so the receiver generally lands off-center inside its own
//! patch. Padding patches surround the tx–rx column on every side.
//!
//! Pixels are stored top-down (row 0 is the far side beyond the receiver),
//! channels-last: channel 0 is the building mask, channel 1 the foliage
//! height relative to the scene's foliage maximum.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{distance_3d, Point3, Scene};

pub const CHANNELS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("patch size {0} must be odd and positive")]
    EvenPatch(usize),
    #[error("transmitter and receiver coincide in the ground plane")]
    Coincident,
    #[error("non-finite coordinates")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapExtract {
    pub pixels: Vec<f32>,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_size: usize,
    pub pad_patches: usize,
    /// 3-D tx–rx distance in meters.
    pub distance_m: f64,
    /// Rotation applied to the map (counter-clockwise, radians).
    pub angle_rad: f64,
    /// Receiver offset above the transmitter, pixels.
    pub rx_offset_px: f64,
}

impl MapExtract {
    pub fn rows_px(&self) -> usize {
        self.patch_rows * self.patch_size
    }

    pub fn cols_px(&self) -> usize {
        self.patch_cols * self.patch_size
    }

    /// (row, col) of the transmitter patch, rows counted from the top.
    pub fn tx_patch_index(&self) -> (usize, usize) {
        (self.patch_rows - 1 - self.pad_patches, self.pad_patches)
    }

    /// (row, col) of the transmitter pixel.
    pub fn tx_pixel(&self) -> (usize, usize) {
        let half = self.patch_size / 2;
        let (pr, pc) = self.tx_patch_index();
        (pr * self.patch_size + half, pc * self.patch_size + half)
    }

    /// Continuous (row, col) image position of the receiver.
    pub fn rx_position(&self) -> (f64, f64) {
        let (r, c) = self.tx_pixel();
        (r as f64 - self.rx_offset_px, c as f64)
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.cols_px() + col) * CHANNELS + channel]
    }

    /// Left-right mirror image about the tx/rx column. Reflecting a scene about
    /// the link axis leaves the path loss unchanged, so this is a valid
    /// training augmentation.
    pub fn mirrored(&self) -> MapExtract {
        let w = self.cols_px();
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(w * CHANNELS) {
            for px in row.chunks(CHANNELS).rev() {
                pixels.extend_from_slice(px);
            }
        }
        MapExtract {
            pixels,
            patch_rows: self.patch_rows,
            patch_cols: self.patch_cols,
            patch_size: self.patch_size,
            pad_patches: self.pad_patches,
            distance_m: self.distance_m,
            angle_rad: self.angle_rad,
            rx_offset_px: self.rx_offset_px,
        }
    }

    /// Patch pixels flattened row, then column, then channel.
    pub fn patch_values(&self, patch_row: usize, patch_col: usize, out: &mut Vec<f32>) {
        let p = self.patch_size;
        let w = self.cols_px();
        for r in 0..p {
            let row = patch_row * p + r;
            let start = (row * w + patch_col * p) * CHANNELS;
            out.extend_from_slice(&self.pixels[start..start + p * CHANNELS]);
        }
    }
}

/// Number of patch rows for a given rounded tx–rx row gap.
pub fn patch_rows_for(row_gap: usize, patch_size: usize, pad_patches: usize) -> usize {
    let half = (patch_size - 1) / 2;
    2 * pad_patches + 1 + (row_gap + half) / patch_size
}

/// Bilinear sample of the mask (as a real) and foliage layers at a metric
/// position; samples outside the raster read as zero.
pub fn sample_bilinear(scene: &Scene, x: f64, y: f64) -> (f64, f64) {
    let u = x / scene.resolution_m - 0.5;
    let v = y / scene.resolution_m - 0.5;
    let c0 = u.floor();
    let r0 = v.floor();
    let fu = u - c0;
    let fv = v - r0;
    let (c0, r0) = (c0 as i64, r0 as i64);
    let mut mask = 0.0;
    let mut foliage = 0.0;
    for (dr, wv) in [(0, 1.0 - fv), (1, fv)] {
        for (dc, wu) in [(0, 1.0 - fu), (1, fu)] {
            let w = wu * wv;
            if w == 0.0 {
                continue;
            }
            let (c, r) = (c0 + dc, r0 + dr);
            if c < 0 || r < 0 || c as usize >= scene.width_px || r as usize >= scene.height_px {
                continue;
            }
            let i = scene.index(c as usize, r as usize);
            mask += w * scene.building_mask[i] as f64;
            foliage += w * scene.foliage_height_m[i];
        }
    }
    (mask, foliage)
}

#[inline]
fn threshold(mask: f64) -> f64 {
    if mask >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Rotate, crop and encode the map around a link.
pub fn align_and_extract(
    scene: &Scene,
    tx: &Point3,
    rx: &Point3,
    patch_size: usize,
    pad_patches: usize,
) -> Result<MapExtract, ExtractError> {
    if patch_size % 2 == 0 {
        return Err(ExtractError::EvenPatch(patch_size));
    }
    if ![tx.x, tx.y, rx.x, rx.y].iter().all(|v| v.is_finite()) {
        return Err(ExtractError::NonFinite);
    }
    let (ex, ey) = (rx.x - tx.x, rx.y - tx.y);
    let dist_2d = ex.hypot(ey);
    if dist_2d == 0.0 {
        return Err(ExtractError::Coincident);
    }
    // Unit vectors of the image frame in scene coordinates.
    let (upx, upy) = (ex / dist_2d, ey / dist_2d);
    let (rtx, rty) = (upy, -upx);

    let res = scene.resolution_m;
    let rx_offset_px = dist_2d / res;
    let row_gap = rx_offset_px.round() as usize;
    let p = patch_size;
    let half = (p - 1) / 2;
    let rows = patch_rows_for(row_gap, p, pad_patches);
    let cols = 2 * pad_patches + 1;
    let (h, w) = (rows * p, cols * p);
    let bottom = (pad_patches * p + half) as f64;
    let left = (pad_patches * p + half) as f64;

    let inv_fmax = 1.0 / scene.foliage_max_m;
    let mut pixels = Vec::with_capacity(h * w * CHANNELS);
    for i in 0..h {
        let dr = (h - 1 - i) as f64 - bottom;
        for j in 0..w {
            let dc = j as f64 - left;
            let x = tx.x + (dc * rtx + dr * upx) * res;
            let y = tx.y + (dc * rty + dr * upy) * res;
            let (m, f) = sample_bilinear(scene, x, y);
            pixels.push(threshold(m) as f32);
            pixels.push((f * inv_fmax) as f32);
        }
    }
    Ok(MapExtract {
        pixels,
        patch_rows: rows,
        patch_cols: cols,
        patch_size: p,
        pad_patches,
        distance_m: distance_3d(tx, rx),
        angle_rad: std::f64::consts::FRAC_PI_2 - upy.atan2(upx),
        rx_offset_px,
    })
}

/// A resampled two-channel raster with the scene's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedLayers {
    pub width_px: usize,
    pub height_px: usize,
    pub mask: Vec<u8>,
    /// Foliage height in meters.
    pub foliage: Vec<f64>,
}

impl RotatedLayers {
    /// Wrap the layers as a scene; buildings get a uniform height.
    pub fn into_scene(
        self,
        template: &Scene,
        id: impl Into<String>,
        building_height_m: f64,
    ) -> Scene {
        let heights = self
            .mask
            .iter()
            .map(|&m| if m == 1 { building_height_m } else { 0.0 })
            .collect();
        let foliage = self
            .mask
            .iter()
            .zip(&self.foliage)
            .map(|(&m, &f)| {
                if m == 1 {
                    0.0
                } else {
                    f.min(template.foliage_max_m)
                }
            })
            .collect();
        Scene {
            id: id.into(),
            width_px: self.width_px,
            height_px: self.height_px,
            resolution_m: template.resolution_m,
            foliage_max_m: template.foliage_max_m,
            building_mask: self.mask,
            building_height_m: heights,
            foliage_height_m: foliage,
        }
    }
}

/// Rotate the map counter-clockwise by `angle` about `center` (meters) by
/// inverse mapping onto the same raster.
pub fn rotate_map(scene: &Scene, center: (f64, f64), angle: f64) -> RotatedLayers {
    let (s, c) = angle.sin_cos();
    let res = scene.resolution_m;
    let n = scene.width_px * scene.height_px;
    let mut mask = Vec::with_capacity(n);
    let mut foliage = Vec::with_capacity(n);
    for row in 0..scene.height_px {
        for col in 0..scene.width_px {
            let px = (col as f64 + 0.5) * res - center.0;
            let py = (row as f64 + 0.5) * res - center.1;
            // Rotate by −angle to find the source position.
            let sx = center.0 + c * px + s * py;
            let sy = center.1 - s * px + c * py;
            let (m, f) = sample_bilinear(scene, sx, sy);
            mask.push(threshold(m) as u8);
            foliage.push(f);
        }
    }
    RotatedLayers {
        width_px: scene.width_px,
        height_px: scene.height_px,
        mask,
        foliage,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractDebugMeta {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_size: usize,
    pub distance_m: f64,
    pub angle_rad: f64,
}

/// Dump an extract as a two-layer scene-format file (`<prefix>.scene`, rows
/// bottom-up like any scene file) plus a JSON sidecar (`<prefix>.json`).
pub fn write_extract_debug(extract: &MapExtract, prefix: impl AsRef<Path>) -> io::Result<()> {
    let prefix = prefix.as_ref();
    let (h, w) = (extract.rows_px(), extract.cols_px());
    let mut out = String::new();
    out.push_str(crate::scene::SCENE_MAGIC);
    out.push('\n');
    writeln!(out, "{w} {h} 1.0 1.0").unwrap();
    out.push_str("LAYERS mask foliage\n");
    for ch in 0..CHANNELS {
        for i in (0..h).rev() {
            for j in 0..w {
                if j > 0 {
                    out.push(' ');
                }
                let v = extract.at(i, j, ch);
                if ch == 0 {
                    write!(out, "{}", v as u8).unwrap();
                } else {
                    write!(out, "{:?}", v as f64).unwrap();
                }
            }
            out.push('\n');
        }
    }
    fs::write(prefix.with_extension("scene"), out)?;
    let meta = ExtractDebugMeta {
        patch_rows: extract.patch_rows,
        patch_cols: extract.patch_cols,
        patch_size: extract.patch_size,
        distance_m: extract.distance_m,
        angle_rad: extract.angle_rad,
    };
    fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&meta).map_err(io::Error::other)?,
    )
}
