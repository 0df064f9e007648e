use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleConfig, OracleError};
use crate::scene::{distance_3d, LinkRecord, Point3, Scene, DATASET_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub poles_per_scene: usize,
    pub ues_per_scene: usize,
    /// Maximum ground distance between pole and UE.
    pub radius_m: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            poles_per_scene: 8,
            ues_per_scene: 500,
            radius_m: 500.0,
            seed: 0,
        }
    }
}

/// Sidecar describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub oracle: OracleConfig,
    pub params: DatasetParams,
    pub scene_ids: Vec<String>,
    pub records_per_scene: Vec<usize>,
    pub total_records: usize,
    pub dropped_outages: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub created_unix_s: Option<u64>,
}

fn scene_rng(seed: u64, scene_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_index as u64);
    rng
}

fn sample_free(rng: &mut ChaCha8Rng, scene: &Scene, free: &[usize], z: f64) -> Point3 {
    let i = free[rng.gen_range(0..free.len())];
    let (col, row) = (i % scene.width_px, i / scene.width_px);
    let r = scene.resolution_m;
    let x = (col as f64 + rng.gen_range(0.05..0.95)) * r;
    let y = (row as f64 + rng.gen_range(0.05..0.95)) * r;
    Point3::new(x, y, z)
}

/// Sample poles and UEs on open ground of every scene and label each pair
/// within range with the oracle. Outages are dropped.
pub fn generate_dataset(
    scenes: &[Scene],
    params: &DatasetParams,
    cfg: &OracleConfig,
) -> Result<(Vec<LinkRecord>, DatasetMeta), OracleError> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut dropped = 0;
    for (si, scene) in scenes.iter().enumerate() {
        if params.poles_per_scene == 0 || params.ues_per_scene == 0 {
            per_scene.push(0);
            continue;
        }
        let free: Vec<usize> = (0..scene.building_mask.len())
            .filter(|&i| scene.building_mask[i] == 0)
            .collect();
        if free.is_empty() {
            return Err(OracleError::NoFreePixel(scene.id.clone()));
        }
        let mut rng = scene_rng(params.seed, si);
        let poles: Vec<Point3> = (0..params.poles_per_scene)
            .map(|_| sample_free(&mut rng, scene, &free, cfg.tx_height_m))
            .collect();
        let ues: Vec<Point3> = (0..params.ues_per_scene)
            .map(|_| sample_free(&mut rng, scene, &free, cfg.rx_height_m))
            .collect();
        let pairs: Vec<(Point3, Point3)> = poles
            .iter()
            .flat_map(|tx| ues.iter().map(move |rx| (*tx, *rx)))
            .filter(|(tx, rx)| {
                let d = tx.distance_2d(rx);
                d > 0.0 && d <= params.radius_m
            })
            .collect();
        let oracle = Oracle::new(scene, cfg.clone())?;
        let outcomes: Vec<Option<LinkRecord>> = pairs
            .par_iter()
            .map(|(tx, rx)| {
                let outcome = oracle.path_loss(tx, rx)?;
                Ok(match outcome {
                    super::LinkOutcome::Connected {
                        pathloss_db, los, ..
                    } => Some(LinkRecord {
                        scene_id: scene.id.clone(),
                        tx: *tx,
                        rx: *rx,
                        distance_3d_m: distance_3d(tx, rx),
                        pathloss_db,
                        los,
                    }),
                    super::LinkOutcome::Outage => None,
                })
            })
            .collect::<Result<_, OracleError>>()?;
        let before = records.len();
        for o in outcomes {
            match o {
                Some(r) => records.push(r),
                None => dropped += 1,
            }
        }
        per_scene.push(records.len() - before);
    }
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        oracle: cfg.clone(),
        params: params.clone(),
        scene_ids: scenes.iter().map(|s| s.id.clone()).collect(),
        records_per_scene: per_scene,
        total_records: records.len(),
        dropped_outages: dropped,
        created_unix_s: None,
    };
    Ok((records, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_poles_empty() {
        let s = Scene::empty("a", 64, 64);
        let p = DatasetParams {
            poles_per_scene: 0,
            ..DatasetParams::default()
        };
        let (r, meta) = generate_dataset(&[s], &p, &OracleConfig::default()).unwrap();
        assert!(r.is_empty());
        assert_eq!(meta.total_records, 0);
    }

    #[test]
    fn open_scene_all_los() {
        let s = Scene::empty("open", 256, 256);
        let p = DatasetParams {
            poles_per_scene: 1,
            ues_per_scene: 100,
            radius_m: 500.0,
            seed: 4,
        };
        let (r, _) = generate_dataset(&[s], &p, &OracleConfig::default()).unwrap();
        assert_eq!(r.len(), 100);
        assert!(r.iter().all(|l| l.los));
        for l in &r {
            l.validate(28e9).unwrap();
        }
    }

    #[test]
    fn no_free_pixel_is_error() {
        let mut s = Scene::empty("full", 64, 64);
        s.building_mask.fill(1);
        s.building_height_m.fill(20.0);
        let p = DatasetParams::default();
        assert!(matches!(
            generate_dataset(&[s], &p, &OracleConfig::default()),
            Err(OracleError::NoFreePixel(_))
        ));
    }
}
