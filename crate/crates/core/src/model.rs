//! Patch transformer that regresses link path loss from an aligned map extract.
//!
//! The token sequence is a distance token followed by the `R·C` map patches,
//! row-major from the top of the extract. Patch tokens receive a learned
//! per-column embedding and a sinusoidal per-row embedding whose index counts
//! patch rows from the bottom, so the transmitter patch keeps the same row
//! index for every link length. Layers are pre-norm; the regression head reads
//! the distance token.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Graph, Real, Tensor, Var};
use crate::extract::{MapExtract, CHANNELS};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DISTANCE_SCALE_M: f64 = 500.0;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("vertical embedding needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("input does not match the model: {0}")]
    Mismatch(String),
    #[error("batch mixes patch-row counts {0} and {1}")]
    MixedRows(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub cols: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 9,
            dim: 64,
            layers: 3,
            heads: 4,
            mlp_dim: 128,
            cols: 3,
            channels: CHANNELS,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad(format!("patch_size must be odd, got {}", self.patch_size));
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return bad(format!("dim must be even and positive, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_dim == 0 {
            return bad("layers and mlp_dim must be positive".into());
        }
        if self.cols != 3 {
            return bad(format!("cols is fixed at 3, got {}", self.cols));
        }
        if self.channels != CHANNELS {
            return bad(format!(
                "channels is fixed at {CHANNELS}, got {}",
                self.channels
            ));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported".into());
        }
        Ok(())
    }

    /// Flattened patch length `P·P·channels`.
    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Names and shapes of all parameters, in checkpoint order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.dim, self.mlp_dim);
        let mut out = vec![
            (
                "patch_proj.weight".to_string(),
                vec![self.patch_features(), d],
            ),
            ("patch_proj.bias".to_string(), vec![d]),
            ("dist_proj.weight".to_string(), vec![1, d]),
            ("dist_proj.bias".to_string(), vec![d]),
            ("col_embed".to_string(), vec![self.cols, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{w}.bias")), vec![d]));
            }
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, m]));
            out.push((p("mlp.fc1.bias"), vec![m]));
            out.push((p("mlp.fc2.weight"), vec![m, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("head.weight".to_string(), vec![d, 1]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Sinusoidal embedding for patch row `r`: `v[d] = sin(r / 10000^(d/D))`,
/// `v[d+1] = cos(r / 10000^(d/D))` for even `d`.
pub fn vertical_embedding(r: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(ModelError::OddDimension(dim));
    }
    let mut v = vec![0.0; dim];
    for d in (0..dim).step_by(2) {
        let a = r as f64 / 10000f64.powf(d as f64 / dim as f64);
        v[d] = a.sin();
        v[d + 1] = a.cos();
    }
    Ok(v)
}

/// Whether positional embeddings are added to the patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionalMode {
    #[default]
    Enabled,
    Disabled,
}

/// Flattened patch tokens of one link.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `R·C` patches, row-major from the top, each flattened row, column,
    /// channel.
    pub patches: Vec<f32>,
    pub patch_rows: usize,
    pub distance_m: f64,
}

impl ModelInput {
    pub fn from_extract(e: &MapExtract) -> Self {
        let mut patches = Vec::with_capacity(e.pixels.len());
        for pr in 0..e.patch_rows {
            for pc in 0..e.patch_cols {
                e.patch_values(pr, pc, &mut patches);
            }
        }
        ModelInput {
            patches,
            patch_rows: e.patch_rows,
            distance_m: e.distance_m,
        }
    }
}

/// Transformer weights plus the normalization needed to map its output to dB.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel<T> {
    pub config: ModelConfig,
    pub distance_scale: f64,
    pub target_offset: f64,
    pub target_scale: f64,
    /// Context padding (in patches) the model was trained with.
    pub pad_patches: usize,
    pub positional: PositionalMode,
    params: Vec<Tensor<T>>,
}

/// Output nodes of one recorded forward pass.
pub struct ForwardNodes {
    /// Standardized predictions, shape `[B]`.
    pub output: Var,
    /// Embedded input sequence `z0`, shape `[B, 1 + R·C, D]`.
    pub tokens: Var,
    /// Attention probabilities per layer and head, each `[B, T, T]`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: ModelConfig,
    distance_scale: f64,
    target_offset: f64,
    target_scale: f64,
    #[serde(default = "default_pad")]
    pad_patches: usize,
}

fn default_pad() -> usize {
    1
}

impl<T: Real> SurrogateModel<T> {
    /// Fresh model: weights from N(0, 0.02²), biases and the column embedding
    /// zero, layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::full(&shape, T::one())
                } else if name.ends_with(".weight") {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
                    Tensor::new(shape, data).expect("layout shape")
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(SurrogateModel {
            config,
            distance_scale: DEFAULT_DISTANCE_SCALE_M,
            target_offset: 0.0,
            target_scale: 1.0,
            pad_patches: 1,
            positional: PositionalMode::Enabled,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        self.config
            .parameter_layout()
            .into_iter()
            .zip(&self.params)
            .map(|((n, _), t)| (n, t.clone()))
            .collect()
    }

    /// Replace parameters from named tensors; names and shapes must match the
    /// layout exactly.
    pub fn set_named_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let layout = self.config.parameter_layout();
        if named.len() != layout.len() {
            return Err(ModelError::Mismatch(format!(
                "expected {} parameters, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "expected {name} {shape:?}, got {n} {:?}",
                    t.shape()
                )));
            }
        }
        self.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        let idx = self
            .config
            .parameter_layout()
            .iter()
            .position(|(n, _)| n == name)?;
        Some(&self.params[idx])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = self
            .config
            .parameter_layout()
            .iter()
            .position(|(n, _)| n == name)?;
        Some(&mut self.params[idx])
    }

    pub fn cast<U: Real>(&self) -> SurrogateModel<U> {
        SurrogateModel {
            config: self.config,
            distance_scale: self.distance_scale,
            target_offset: self.target_offset,
            target_scale: self.target_scale,
            pad_patches: self.pad_patches,
            positional: self.positional,
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }

    fn check_input(&self, x: &ModelInput) -> Result<()> {
        let want = x.patch_rows * self.config.cols * self.config.patch_features();
        if x.patch_rows == 0 || x.patches.len() != want {
            return Err(ModelError::Mismatch(format!(
                "{} patch values for {} patch rows, expected {want}",
                x.patches.len(),
                x.patch_rows
            )));
        }
        if !x.distance_m.is_finite() {
            return Err(ModelError::Mismatch("non-finite distance".into()));
        }
        Ok(())
    }

    /// Positional table `[R·C, D]` of sinusoidal row embeddings, row index
    /// counted from the bottom patch row.
    fn vertical_table(&self, rows: usize) -> Tensor<T> {
        let (c, d) = (self.config.cols, self.config.dim);
        let mut data = Vec::with_capacity(rows * c * d);
        for pr in 0..rows {
            let v = vertical_embedding(rows - 1 - pr, d).expect("even dim");
            for _ in 0..c {
                data.extend(v.iter().map(|&x| T::lit(x)));
            }
        }
        Tensor::new(vec![rows * c, d], data).expect("table shape")
    }

    /// Record a forward pass over a batch sharing one patch-row count.
    /// `params` are graph nodes for [`Self::params`] in layout order.
    pub fn record(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        batch: &[&ModelInput],
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let Some(first) = batch.first() else {
            return Err(ModelError::Mismatch("empty batch".into()));
        };
        let rows = first.patch_rows;
        for x in batch {
            self.check_input(x)?;
            if x.patch_rows != rows {
                return Err(ModelError::MixedRows(rows, x.patch_rows));
            }
        }
        let b = batch.len();
        let n = rows * cfg.cols;
        let (d, heads) = (cfg.dim, cfg.heads);
        let dh = d / heads;

        let mut patch_data = Vec::with_capacity(b * n * cfg.patch_features());
        for x in batch {
            patch_data.extend(x.patches.iter().map(|&v| T::lit(v as f64)));
        }
        let patches = g.constant(Tensor::new(vec![b, n, cfg.patch_features()], patch_data)?);
        let dist = batch
            .iter()
            .map(|x| T::lit(x.distance_m / self.distance_scale))
            .collect();
        let dist = g.constant(Tensor::new(vec![b, 1, 1], dist)?);

        let mut h = g.linear(patches, params[0], params[1])?;
        if self.positional == PositionalMode::Enabled {
            let vert = g.constant(self.vertical_table(rows));
            let tiles = vec![params[4]; rows];
            let horiz = g.concat(&tiles, 0)?;
            let pos = g.add(vert, horiz)?;
            h = g.add(h, pos)?;
        }
        let z0 = g.linear(dist, params[2], params[3])?;
        let tokens = g.concat(&[z0, h], 1)?;
        let mut x = tokens;

        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = &params[5 + l * PARAMS_PER_LAYER..5 + (l + 1) * PARAMS_PER_LAYER];
            let y = g.layer_norm(x, p[0], p[1], LN_EPS)?;
            let q = g.linear(y, p[2], p[3])?;
            let k = g.linear(y, p[4], p[5])?;
            let v = g.linear(y, p[6], p[7])?;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice(q, 2, s, e)?;
                let kh = g.slice(k, 2, s, e)?;
                let vh = g.slice(v, 2, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let a = g.softmax(scores)?;
                maps.push(a);
                outs.push(g.matmul(a, vh)?);
            }
            attention.push(maps);
            let o = if heads == 1 {
                outs[0]
            } else {
                g.concat(&outs, 2)?
            };
            let o = g.linear(o, p[8], p[9])?;
            x = g.add(x, o)?;

            let y = g.layer_norm(x, p[10], p[11], LN_EPS)?;
            let m = g.linear(y, p[12], p[13])?;
            let m = g.gelu(m)?;
            let m = g.linear(m, p[14], p[15])?;
            x = g.add(x, m)?;
        }
        let tok = g.slice(x, 1, 0, 1)?;
        let head = self.params.len() - 2;
        let out = g.linear(tok, params[head], params[head + 1])?;
        let output = g.reshape(out, &[b])?;
        Ok(ForwardNodes {
            output,
            tokens,
            attention,
        })
    }

    fn leaves(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Predictions in dB for a batch sharing one patch-row count.
    pub fn batch_forward(&self, batch: &[&ModelInput]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.leaves(&mut g, false);
        let nodes = self.record(&mut g, &vars, batch)?;
        Ok(g.value(nodes.output)
            .data()
            .iter()
            .map(|v| v.as_f64() * self.target_scale + self.target_offset)
            .collect())
    }

    pub fn forward(&self, input: &ModelInput) -> Result<f64> {
        Ok(self.batch_forward(&[input])?[0])
    }

    /// Predictions for arbitrary inputs: grouped by patch-row count, evaluated
    /// in chunks of `chunk`, returned in input order.
    pub fn predict(&self, inputs: &[ModelInput], chunk: usize) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by_key(|&i| (inputs[i].patch_rows, i));
        let mut out = vec![0.0; inputs.len()];
        for group in order.chunk_by(|&a, &b| inputs[a].patch_rows == inputs[b].patch_rows) {
            for idx in group.chunks(chunk.max(1)) {
                let batch: Vec<&ModelInput> = idx.iter().map(|&i| &inputs[i]).collect();
                for (&i, p) in idx.iter().zip(self.batch_forward(&batch)?) {
                    out[i] = p;
                }
            }
        }
        Ok(out)
    }

    /// Attention probabilities of one input: per layer, a `[heads, T, T]`
    /// tensor.
    pub fn attention_maps(&self, input: &ModelInput) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = self.leaves(&mut g, false);
        let nodes = self.record(&mut g, &vars, &[input])?;
        let t = 1 + input.patch_rows * self.config.cols;
        nodes
            .attention
            .iter()
            .map(|maps| {
                let data = maps
                    .iter()
                    .flat_map(|&m| g.value(m).data().iter().copied())
                    .collect();
                Ok(Tensor::new(vec![self.config.heads, t, t], data)?)
            })
            .collect()
    }

    /// MSE on standardized targets and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[&ModelInput],
        targets_db: &[f64],
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        if targets_db.len() != batch.len() {
            return Err(ModelError::Mismatch(format!(
                "{} targets for {} inputs",
                targets_db.len(),
                batch.len()
            )));
        }
        let mut g = Graph::new();
        let vars = self.leaves(&mut g, true);
        let nodes = self.record(&mut g, &vars, batch)?;
        let t: Vec<T> = targets_db
            .iter()
            .map(|&y| T::lit((y - self.target_offset) / self.target_scale))
            .collect();
        let loss = g.mse_loss(nodes.output, &Tensor::new(vec![t.len()], t)?)?;
        let mut grads = g.backward(loss)?;
        let gs = vars.iter().map(|&v| grads.take_or_zeros(v)).collect();
        Ok((g.value(loss).item().as_f64(), gs))
    }

    /// Write `path` (weights) and `path.json` (config and normalization).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |p: &Path, source| ModelError::Io {
            path: p.to_path_buf(),
            source,
        };
        autodiff::save_weights(path, &self.named_params()).map_err(|e| io_err(path, e))?;
        let side = Sidecar {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config,
            distance_scale: self.distance_scale,
            target_offset: self.target_offset,
            target_scale: self.target_scale,
            pad_patches: self.pad_patches,
        };
        let sp = sidecar_path(path);
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        fs::write(&sp, text + "\n").map_err(|e| io_err(&sp, e))
    }
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl SurrogateModel<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sp = sidecar_path(path);
        let text = fs::read_to_string(&sp).map_err(|source| ModelError::Io {
            path: sp.clone(),
            source,
        })?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| ModelError::Format {
            path: sp.clone(),
            msg: e.to_string(),
        })?;
        if side.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Format {
                path: sp,
                msg: format!("unsupported format version {}", side.format_version),
            });
        }
        let named = autodiff::load_weights(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m = SurrogateModel::new(side.config, 0)?;
        m.distance_scale = side.distance_scale;
        m.target_offset = side.target_offset;
        m.target_scale = side.target_scale;
        m.pad_patches = side.pad_patches;
        m.set_named_params(named)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            patch_size: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_dim: 12,
            ..ModelConfig::default()
        }
    }

    fn random_input(cfg: &ModelConfig, rows: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * cfg.cols * cfg.patch_features();
        ModelInput {
            patches: (0..n)
                .map(|i| {
                    if i % 2 == 0 {
                        rng.gen_bool(0.3) as u8 as f32
                    } else {
                        rng.gen_range(0.0..1.0)
                    }
                })
                .collect(),
            patch_rows: rows,
            distance_m: rng.gen_range(5.0..300.0),
        }
    }

    #[test]
    fn vertical_embedding_values() {
        let v = vertical_embedding(0, 6).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let v = vertical_embedding(1, 64).unwrap();
        assert!((v[0] - 0.84147).abs() < 5e-6 && (v[1] - 0.54030).abs() < 5e-6);
        let v = vertical_embedding(3, 4).unwrap();
        assert!((v[2] - 0.02999).abs() < 1e-5 && (v[3] - 0.99955).abs() < 1e-5);
        assert!(matches!(
            vertical_embedding(1, 5),
            Err(ModelError::OddDimension(5))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig {
                patch_size: 8,
                ..ModelConfig::default()
            },
            ModelConfig {
                heads: 5,
                ..ModelConfig::default()
            },
            ModelConfig {
                dim: 63,
                heads: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                cols: 5,
                ..ModelConfig::default()
            },
        ] {
            assert!(SurrogateModel::<f64>::new(bad, 0).is_err());
        }
    }

    #[test]
    fn parameter_count_ignores_rows() {
        let cfg = ModelConfig::default();
        let m = SurrogateModel::<f64>::new(cfg, 1).unwrap();
        let total: usize = m.params().iter().map(|t| t.len()).sum();
        assert_eq!(total, cfg.parameter_count());
        for rows in [3, 7, 40] {
            assert!(m
                .forward(&random_input(&cfg, rows, rows as u64))
                .unwrap()
                .is_finite());
        }
    }

    #[test]
    fn sequence_length_and_zero_map_tokens() {
        let cfg = small();
        let mut m = SurrogateModel::<f64>::new(cfg, 2).unwrap();
        for name in ["patch_proj.weight", "patch_proj.bias"] {
            let t = m.param_by_name_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let u = m.param_by_name_mut("col_embed").unwrap();
        for (i, v) in u.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let x = ModelInput {
            patches: vec![0.0; 6 * 3 * cfg.patch_features()],
            patch_rows: 6,
            distance_m: 100.0,
        };
        let mut g = Graph::new();
        let vars = m.leaves(&mut g, false);
        let nodes = m.record(&mut g, &vars, &[&x]).unwrap();
        let z = g.value(nodes.tokens);
        assert_eq!(z.shape(), &[1, 19, cfg.dim]);
        let h = &z.data()[cfg.dim..];
        let u = m.param_by_name("col_embed").unwrap().data().to_vec();
        for pr in 0..6 {
            let v = vertical_embedding(5 - pr, cfg.dim).unwrap();
            for pc in 0..3 {
                for d in 0..cfg.dim {
                    let got = h[(pr * 3 + pc) * cfg.dim + d];
                    assert_eq!(got, v[d] + u[pc * cfg.dim + d]);
                }
            }
        }
        let maps = m.attention_maps(&x).unwrap();
        assert_eq!(maps[0].shape(), &[cfg.heads, 19, 19]);
    }

    #[test]
    fn zero_head_is_constant() {
        let cfg = small();
        let mut m = SurrogateModel::<f64>::new(cfg, 3).unwrap();
        m.target_offset = 110.0;
        m.target_scale = 12.0;
        *m.param_by_name_mut("head.weight").unwrap() = Tensor::zeros(&[cfg.dim, 1]);
        m.param_by_name_mut("head.bias").unwrap().data_mut()[0] = 0.25;
        for (rows, s) in [(3, 1), (5, 2), (9, 3)] {
            assert_eq!(
                m.forward(&random_input(&cfg, rows, s)).unwrap(),
                0.25 * 12.0 + 110.0
            );
        }
    }

    #[test]
    fn distance_token_is_linear() {
        let cfg = small();
        let m = SurrogateModel::<f64>::new(cfg, 4).unwrap();
        let w = m.param_by_name("dist_proj.weight").unwrap().data().to_vec();
        let token = |dist: f64| -> Vec<f64> {
            let x = ModelInput {
                distance_m: dist,
                ..random_input(&cfg, 3, 5)
            };
            let mut g = Graph::new();
            let vars = m.leaves(&mut g, false);
            let nodes = m.record(&mut g, &vars, &[&x]).unwrap();
            g.value(nodes.tokens).data()[..cfg.dim].to_vec()
        };
        let (a, b) = (token(100.0), token(200.0));
        for d in 0..cfg.dim {
            assert!((a[d] - w[d] * 0.2).abs() < 1e-15);
            assert!((b[d] - 2.0 * a[d]).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_invariance_without_positions() {
        let cfg = small();
        let mut m = SurrogateModel::<f64>::new(cfg, 5).unwrap();
        m.positional = PositionalMode::Disabled;
        let x = random_input(&cfg, 5, 6);
        let f = cfg.patch_features();
        let n = 15;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut y = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            y.patches[dst * f..(dst + 1) * f].copy_from_slice(&x.patches[src * f..(src + 1) * f]);
        }
        assert_ne!(x.patches, y.patches);
        let (a, b) = (m.forward(&x).unwrap(), m.forward(&y).unwrap());
        assert!((a - b).abs() < 1e-6, "{a} {b}");
        m.positional = PositionalMode::Enabled;
        assert!((m.forward(&x).unwrap() - m.forward(&y).unwrap()).abs() > 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small();
        let m = SurrogateModel::<f64>::new(cfg, 8).unwrap();
        let maps = m.attention_maps(&random_input(&cfg, 4, 9)).unwrap();
        for t in maps {
            for row in t.data().chunks(13) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_matches_single_and_rejects_mixed_rows() {
        let cfg = small();
        let m = SurrogateModel::<f64>::new(cfg, 10).unwrap();
        let xs: Vec<ModelInput> = (0..5).map(|s| random_input(&cfg, 4, 20 + s)).collect();
        let refs: Vec<&ModelInput> = xs.iter().collect();
        let batch = m.batch_forward(&refs).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            assert!((m.forward(x).unwrap() - b).abs() < 1e-6);
        }
        let dup = m.batch_forward(&[&xs[0], &xs[0], &xs[0]]).unwrap();
        assert!(dup.iter().all(|&v| v == dup[0]));
        let mut rev = refs.clone();
        rev.reverse();
        let mut a = m.batch_forward(&rev).unwrap();
        a.reverse();
        for (p, q) in a.iter().zip(&batch) {
            assert!((p - q).abs() < 1e-12);
        }
        let other = random_input(&cfg, 6, 1);
        assert!(matches!(
            m.batch_forward(&[&xs[0], &other]),
            Err(ModelError::MixedRows(4, 6))
        ));
        let mut all = xs.clone();
        all.push(other.clone());
        let p = m.predict(&all, 2).unwrap();
        assert!((p[5] - m.forward(&other).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn full_gradient_check() {
        let cfg = small();
        let m = SurrogateModel::<f64>::new(cfg, 11).unwrap();
        // Larger init so every path carries signal.
        let mut m = m;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let xs = [random_input(&cfg, 3, 13), random_input(&cfg, 3, 14)];
        let targets = Tensor::from_f64(&[2], &[0.7, -0.4]).unwrap();
        let model = &m;
        let r = grad_check(
            |g, vars| {
                let nodes = model
                    .record(g, vars, &[&xs[0], &xs[1]])
                    .map_err(|e| match e {
                        ModelError::Autodiff(e) => e,
                        other => panic!("{other}"),
                    })?;
                g.mse_loss(nodes.output, &targets)
            },
            m.params(),
            GradCheckOptions {
                tol: 1e-3,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(
            r.passed(),
            "max rel {} {:?}",
            r.max_rel_err,
            &r.failures[..r.failures.len().min(3)]
        );
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.plw");
        let cfg = small();
        let mut m = SurrogateModel::<f32>::new(cfg, 15).unwrap();
        m.target_offset = 101.5;
        m.target_scale = 9.25;
        m.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = random_input(&cfg, 5, 16);
        assert_eq!(
            back.forward(&x).unwrap().to_bits(),
            m.forward(&x).unwrap().to_bits()
        );
        assert_eq!(fs::read(&path).unwrap(), {
            back.save(dir.path().join("again.plw")).unwrap();
            fs::read(dir.path().join("again.plw")).unwrap()
        });
        fs::write(sidecar_path(&path), "{}").unwrap();
        assert!(matches!(
            SurrogateModel::load(&path),
            Err(ModelError::Format { .. })
        ));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = SurrogateModel::<f32>::new(ModelConfig::default(), 9).unwrap();
        let b = SurrogateModel::<f32>::new(ModelConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.param_by_name("col_embed")
                .unwrap()
                .data()
                .iter()
                .filter(|v| **v != 0.0)
                .count(),
            0
        );
    }
}
