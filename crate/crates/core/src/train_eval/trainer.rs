use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, SceneSet, TrainEvalError};
use crate::autodiff::{adam_step, clip_global_norm, AdamConfig, AdamState, Real};
use crate::extract::align_and_extract;
use crate::model::{ModelConfig, ModelInput, SurrogateModel};
use crate::scene::LinkRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub pad_patches: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Validation interval in steps; the final step is always validated.
    pub eval_every: usize,
    pub log_every: usize,
    /// Validate on at most this many links, evenly strided.
    pub val_max: usize,
    /// Also train on the left-right mirror image of every training extract.
    pub flip_augment: bool,
    /// Decoupled (AdamW) weight decay on weight matrices.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            pad_patches: 1,
            lr: 3e-4,
            batch: 32,
            steps: 20_000,
            seed: 0,
            clip_norm: 1.0,
            eval_every: 1000,
            log_every: 100,
            val_max: 2000,
            flip_augment: false,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0
            || self.steps == 0
            || self.eval_every == 0
            || self.log_every == 0
            || self.val_max == 0
        {
            return Err(TrainEvalError::Invalid(
                "batch, steps, eval_every, log_every and val_max must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.clip_norm > 0.0)
            || !(0.0..1.0).contains(&(self.lr * self.weight_decay))
        {
            return Err(TrainEvalError::Invalid(
                "lr must be >= 0, clip_norm > 0 and 0 <= lr·weight_decay < 1".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub lr: f64,
    /// Mean standardized training loss since the previous entry.
    pub train_loss: f64,
    pub val_rmse_db: Option<f64>,
}

pub struct TrainOutcome<T> {
    /// Parameters at the best validation RMSE.
    pub model: SurrogateModel<T>,
    pub history: Vec<HistoryEntry>,
    pub best_step: usize,
    pub best_val_rmse_db: f64,
}

/// Model inputs for `records`, extracted in parallel, in input order.
pub fn extract_inputs(
    scenes: &SceneSet,
    records: &[LinkRecord],
    patch_size: usize,
    pad_patches: usize,
) -> Result<Vec<ModelInput>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let scene = scenes.get(&r.scene_id)?;
            let e = align_and_extract(scene, &r.tx, &r.rx, patch_size, pad_patches)
                .map_err(|source| TrainEvalError::Extract { link: i, source })?;
            Ok(ModelInput::from_extract(&e))
        })
        .collect()
}

/// Batches of one epoch: indices grouped by patch-row count, shuffled within
/// groups, cut into batches, then the batch order shuffled.
fn epoch_batches(
    groups: &BTreeMap<usize, Vec<usize>>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for idx in groups.values() {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        out.extend(idx.chunks(batch).map(|c| c.to_vec()));
    }
    out.shuffle(rng);
    out
}

fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt()
}

/// Minibatch MSE training with Adam, cosine decay and global-norm clipping.
/// The returned model holds the parameters with the lowest validation RMSE.
pub fn train<T: Real>(
    scenes: &SceneSet,
    train: &[LinkRecord],
    val: &[LinkRecord],
    cfg: &TrainConfig,
    mut on_entry: impl FnMut(&HistoryEntry),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainEvalError::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let p = cfg.model.patch_size;
    let (inputs, targets): (Vec<ModelInput>, Vec<f64>) = if cfg.flip_augment {
        let pairs = train
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let scene = scenes.get(&r.scene_id)?;
                let e = align_and_extract(scene, &r.tx, &r.rx, p, cfg.pad_patches)
                    .map_err(|source| TrainEvalError::Extract { link: i, source })?;
                Ok([
                    ModelInput::from_extract(&e),
                    ModelInput::from_extract(&e.mirrored()),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = train.iter().flat_map(|r| [r.pathloss_db; 2]).collect();
        (pairs.into_iter().flatten().collect(), targets)
    } else {
        let targets = train.iter().map(|r| r.pathloss_db).collect();
        (extract_inputs(scenes, train, p, cfg.pad_patches)?, targets)
    };
    let stride = val.len().div_ceil(cfg.val_max);
    let val: Vec<LinkRecord> = val.iter().step_by(stride).cloned().collect();
    let val_inputs = extract_inputs(scenes, &val, p, cfg.pad_patches)?;
    let val_targets: Vec<f64> = val.iter().map(|r| r.pathloss_db).collect();

    let mut model = SurrogateModel::<T>::new(cfg.model, cfg.seed)?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let std = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    model.target_offset = mean;
    model.target_scale = if std > 1e-9 { std } else { 1.0 };
    model.pad_patches = cfg.pad_patches;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, x) in inputs.iter().enumerate() {
        groups.entry(x.patch_rows).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut state = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, model.params().to_vec());
    let mut window = (0.0, 0usize);

    for step in 1..=cfg.steps {
        if queue.is_empty() {
            queue = epoch_batches(&groups, cfg.batch, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty epoch");
        let batch: Vec<&ModelInput> = idx.iter().map(|&i| &inputs[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let (loss, mut grads) = model.loss_and_grads(&batch, &y)?;
        if !loss.is_finite() {
            return Err(TrainEvalError::Divergence { step });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = cosine_lr(cfg.lr, step - 1, cfg.steps);
        let adam = AdamConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        adam_step(model.params_mut(), &grads, &mut state, &adam);
        window.0 += loss;
        window.1 += 1;

        let validate = step % cfg.eval_every == 0 || step == cfg.steps;
        if step % cfg.log_every == 0 || validate {
            let val_rmse_db = if validate {
                let pred = model.predict(&val_inputs, 64)?;
                let r = rmse(&pred, &val_targets);
                if !r.is_finite() {
                    return Err(TrainEvalError::Divergence { step });
                }
                if r < best.0 {
                    best = (r, step, model.params().to_vec());
                }
                Some(r)
            } else {
                None
            };
            let entry = HistoryEntry {
                step,
                lr,
                train_loss: window.0 / window.1 as f64,
                val_rmse_db,
            };
            on_entry(&entry);
            history.push(entry);
            window = (0.0, 0);
        }
    }
    let (best_val_rmse_db, best_step, params) = best;
    model.params_mut().clone_from_slice(&params);
    Ok(TrainOutcome {
        model,
        history,
        best_step,
        best_val_rmse_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_dataset, DatasetParams, GenParams, OracleConfig};

    fn fixture() -> (SceneSet, Vec<LinkRecord>) {
        let scene = crate::oracle::generate_scene("t0", 96, 96, &GenParams::default(), 3).unwrap();
        let params = DatasetParams {
            poles_per_scene: 2,
            ues_per_scene: 12,
            radius_m: 40.0,
            seed: 5,
        };
        let (recs, _) = generate_dataset(
            std::slice::from_ref(&scene),
            &params,
            &OracleConfig::default(),
        )
        .unwrap();
        (SceneSet::new([scene]), recs)
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                patch_size: 5,
                dim: 16,
                layers: 1,
                heads: 2,
                mlp_dim: 16,
                ..ModelConfig::default()
            },
            steps: 20,
            batch: 4,
            eval_every: 10,
            log_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let (scenes, recs) = fixture();
        let cfg = TrainConfig { lr: 0.0, ..tiny() };
        let out = train::<f64>(&scenes, &recs, &recs, &cfg, |_| {}).unwrap();
        let fresh = SurrogateModel::<f64>::new(cfg.model, cfg.seed).unwrap();
        assert_eq!(out.model.params(), fresh.params());
        let vals: Vec<f64> = out.history.iter().filter_map(|h| h.val_rmse_db).collect();
        assert_eq!(vals.len(), 2);
        assert_eq!(vals[0], vals[1]);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (scenes, recs) = fixture();
        let run = || {
            let out = train::<f32>(&scenes, &recs, &recs[..5], &tiny(), |_| {}).unwrap();
            (out.history, out.model)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 4);
    }

    #[test]
    fn batches_never_mix_rows() {
        let mut groups = BTreeMap::new();
        groups.insert(3, (0..7).collect::<Vec<_>>());
        groups.insert(5, (7..10).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(&groups, 4, &mut rng);
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.iter().all(|&i| i < 7) || batch.iter().all(|&i| i >= 7));
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    }
}
