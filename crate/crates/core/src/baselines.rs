//! Reference predictors: the 3GPP UMi street-canyon path-loss model driven by
//! the true LOS flag, and a distance-only MLP.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, AutodiffError, Graph, Tensor, Var};
use crate::scene::LinkRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("3GPP UMi model needs 1 m <= d3D and d2D <= d3D, got d2D={d2d} m, d3D={d3d} m")]
    Domain { d2d: f64, d3d: f64 },
    #[error("invalid 3GPP config: {0}")]
    Config(String),
    #[error("distance MLP: {0}")]
    Mlp(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GppConfig {
    pub fc_ghz: f64,
    pub h_bs_m: f64,
    pub h_ut_m: f64,
    /// Speed of light as used by the breakpoint definition.
    pub c: f64,
}

impl Default for GppConfig {
    fn default() -> Self {
        GppConfig {
            fc_ghz: 28.0,
            h_bs_m: 9.0,
            h_ut_m: 1.5,
            c: 3.0e8,
        }
    }
}

impl GppConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(0.5..=100.0).contains(&self.fc_ghz) {
            return Err(BaselineError::Config(format!(
                "fc_ghz {} outside [0.5, 100]",
                self.fc_ghz
            )));
        }
        if !(self.h_bs_m > 0.0 && self.h_ut_m > 0.0 && self.c > 0.0) {
            return Err(BaselineError::Config(
                "heights and c must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Breakpoint distance `d'BP` with 1 m effective environment height.
    pub fn breakpoint_m(&self) -> f64 {
        4.0 * (self.h_bs_m - 1.0) * (self.h_ut_m - 1.0) * self.fc_ghz * 1e9 / self.c
    }
}

fn los_pl(d2d: f64, d3d: f64, cfg: &GppConfig) -> f64 {
    let bp = cfg.breakpoint_m();
    let f = 20.0 * cfg.fc_ghz.log10();
    if d2d <= bp {
        32.4 + 21.0 * d3d.log10() + f
    } else {
        let dh = cfg.h_bs_m - cfg.h_ut_m;
        32.4 + 40.0 * d3d.log10() + f - 9.5 * (bp * bp + dh * dh).log10()
    }
}

/// Mean UMi street-canyon path loss in dB, without shadow fading.
pub fn gpp_umi_pathloss(
    d2d_m: f64,
    d3d_m: f64,
    cfg: &GppConfig,
    los: bool,
) -> Result<f64, BaselineError> {
    cfg.validate()?;
    if !(d3d_m >= 1.0 && d2d_m >= 0.0 && d2d_m <= d3d_m * (1.0 + 1e-12)) || !d3d_m.is_finite() {
        return Err(BaselineError::Domain {
            d2d: d2d_m,
            d3d: d3d_m,
        });
    }
    let pl_los = los_pl(d2d_m, d3d_m, cfg);
    if los {
        return Ok(pl_los);
    }
    let nlos = 35.3 * d3d_m.log10() + 22.4 + 21.3 * cfg.fc_ghz.log10() - 0.3 * (cfg.h_ut_m - 1.5);
    Ok(pl_los.max(nlos))
}

/// 3GPP predictions for records, using each record's own geometry and LOS flag.
pub fn gpp_predict(records: &[LinkRecord], cfg: &GppConfig) -> Result<Vec<f64>, BaselineError> {
    records
        .iter()
        .map(|r| gpp_umi_pathloss(r.distance_2d_m(), r.distance_3d_m, cfg, r.los))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 32,
            steps: 3000,
            batch: 128,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Three-layer ReLU MLP on `(log10 d3D − 2, los)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMlp {
    pub config: MlpConfig,
    pub target_offset: f64,
    pub target_scale: f64,
    /// w1 [2, H], b1 [H], w2 [H, H], b2 [H], w3 [H, 1], b3 [1], flattened.
    pub weights: Vec<Vec<f64>>,
}

fn features(d3d_m: f64, los: bool) -> [f64; 2] {
    [d3d_m.log10() - 2.0, if los { 1.0 } else { 0.0 }]
}

impl DistanceMlp {
    fn shapes(h: usize) -> [Vec<usize>; 6] {
        [
            vec![2, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, 1],
            vec![1],
        ]
    }

    fn tensors(&self) -> Vec<Tensor<f64>> {
        Self::shapes(self.config.hidden)
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| Tensor::new(s.clone(), w.clone()).expect("weight shape"))
            .collect()
    }

    fn record(g: &mut Graph<f64>, p: &[Var], x: Var) -> Result<Var, AutodiffError> {
        let h = g.linear(x, p[0], p[1])?;
        let h = g.relu(h)?;
        let h = g.linear(h, p[2], p[3])?;
        let h = g.relu(h)?;
        g.linear(h, p[4], p[5])
    }

    /// Train with Adam on MSE of standardized targets; sampling is
    /// without replacement per epoch and fully determined by the seed.
    pub fn train(records: &[LinkRecord], config: MlpConfig) -> Result<Self, BaselineError> {
        if records.is_empty() {
            return Err(BaselineError::Mlp("empty training set".into()));
        }
        if config.hidden == 0 || config.batch == 0 {
            return Err(BaselineError::Mlp(
                "hidden and batch must be positive".into(),
            ));
        }
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.pathloss_db).sum::<f64>() / n;
        let var = records
            .iter()
            .map(|r| (r.pathloss_db - mean).powi(2))
            .sum::<f64>()
            / n;
        let scale = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut params: Vec<Tensor<f64>> = Self::shapes(h)
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i % 2 == 1 {
                    return Tensor::zeros(s);
                }
                // He initialization for ReLU layers.
                let std = (2.0 / s[0] as f64).sqrt();
                let n = s.iter().product();
                let d = (0..n).map(|_| normal.sample(&mut rng) * std).collect();
                Tensor::new(s.clone(), d).expect("shape")
            })
            .collect();
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&params);
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut cursor = order.len();
        for _ in 0..config.steps {
            let mut idx = Vec::with_capacity(config.batch);
            while idx.len() < config.batch.min(records.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let mut x = Vec::with_capacity(idx.len() * 2);
            let mut y = Vec::with_capacity(idx.len());
            for &i in &idx {
                let r = &records[i];
                x.extend(features(r.distance_3d_m, r.los));
                y.push((r.pathloss_db - mean) / scale);
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let xv = g.constant(Tensor::new(vec![idx.len(), 2], x)?);
            let out = Self::record(&mut g, &vars, xv)?;
            let loss = g.mse_loss(out, &Tensor::new(vec![idx.len()], y)?)?;
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take_or_zeros(v)).collect();
            adam_step(&mut params, &gs, &mut state, &adam);
        }
        Ok(DistanceMlp {
            config,
            target_offset: mean,
            target_scale: scale,
            weights: params.into_iter().map(|t| t.into_data()).collect(),
        })
    }

    pub fn predict_one(&self, d3d_m: f64, los: bool) -> f64 {
        self.predict_features(&[features(d3d_m, los)])[0]
    }

    fn predict_features(&self, xs: &[[f64; 2]]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.constant(t)).collect();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let xv = g.constant(Tensor::new(vec![xs.len(), 2], flat).expect("feature shape"));
        let out = Self::record(&mut g, &vars, xv).expect("trained MLP is well-formed");
        g.value(out)
            .data()
            .iter()
            .map(|v| v * self.target_scale + self.target_offset)
            .collect()
    }

    pub fn predict(&self, records: &[LinkRecord]) -> Vec<f64> {
        let xs: Vec<[f64; 2]> = records
            .iter()
            .map(|r| features(r.distance_3d_m, r.los))
            .collect();
        xs.chunks(4096)
            .flat_map(|c| self.predict_features(c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fspl_db;
    use crate::scene::Point3;
    use proptest::prelude::*;

    fn cfg() -> GppConfig {
        GppConfig::default()
    }

    fn d3(d2: f64) -> f64 {
        (d2 * d2 + 7.5f64 * 7.5).sqrt()
    }

    #[test]
    fn spot_values() {
        let c = cfg();
        let los = gpp_umi_pathloss(99.0, 100.0, &c, true).unwrap();
        assert!((los - 103.34).abs() < 0.01, "{los}");
        let nlos = gpp_umi_pathloss(99.0, 100.0, &c, false).unwrap();
        assert!((nlos - 123.82).abs() < 0.01, "{nlos}");
        let short = gpp_umi_pathloss(7.0, 10.0, &c, false).unwrap();
        assert!((short - 88.52).abs() < 0.01, "{short}");
        assert!((gpp_umi_pathloss(7.0, 10.0, &c, true).unwrap() - 82.34).abs() < 0.01);
        assert!((c.breakpoint_m() - 1493.33).abs() < 0.01);
    }

    #[test]
    fn breakpoint_continuity() {
        let c = cfg();
        let bp = c.breakpoint_m();
        let d3 = d3(bp);
        let pl1 = 32.4 + 21.0 * d3.log10() + 20.0 * c.fc_ghz.log10();
        let dh = c.h_bs_m - c.h_ut_m;
        let pl2 =
            32.4 + 40.0 * d3.log10() + 20.0 * c.fc_ghz.log10() - 9.5 * (bp * bp + dh * dh).log10();
        assert!((pl1 - pl2).abs() < 1e-9);
        assert_eq!(gpp_umi_pathloss(bp, d3, &c, true).unwrap(), pl1);
        let above = gpp_umi_pathloss(bp * (1.0 + 1e-12), d3 * (1.0 + 1e-12), &c, true).unwrap();
        assert!((above - pl1).abs() < 1e-9);
    }

    #[test]
    fn domain_errors() {
        let c = cfg();
        assert!(gpp_umi_pathloss(0.5, 0.9, &c, true).is_err());
        assert!(gpp_umi_pathloss(20.0, 10.0, &c, true).is_err());
        let bad = GppConfig { fc_ghz: 200.0, ..c };
        assert!(matches!(
            gpp_umi_pathloss(5.0, 10.0, &bad, true),
            Err(BaselineError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn nlos_dominates_and_monotone(a in 1.0f64..1000.0, b in 1.0f64..1000.0) {
            let c = cfg();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for los in [true, false] {
                let p = gpp_umi_pathloss(lo, d3(lo), &c, los).unwrap();
                let q = gpp_umi_pathloss(hi, d3(hi), &c, los).unwrap();
                prop_assert!(q >= p);
            }
            let l = gpp_umi_pathloss(a, d3(a), &c, true).unwrap();
            let n = gpp_umi_pathloss(a, d3(a), &c, false).unwrap();
            prop_assert!(n >= l);
        }
    }

    fn link(d: f64, los: bool, pl: f64) -> LinkRecord {
        let tx = Point3::new(0.0, 0.0, 9.0);
        let rx = Point3::new((d * d - 7.5 * 7.5).max(0.0).sqrt(), 0.0, 1.5);
        LinkRecord {
            scene_id: "s".into(),
            tx,
            rx,
            distance_3d_m: crate::scene::distance_3d(&tx, &rx),
            pathloss_db: pl,
            los,
        }
    }

    #[test]
    fn mlp_constant_target() {
        let recs: Vec<LinkRecord> = (0..64)
            .map(|i| link(10.0 + 5.0 * i as f64, i % 3 == 0, 120.0))
            .collect();
        let m = DistanceMlp::train(
            &recs,
            MlpConfig {
                steps: 300,
                ..MlpConfig::default()
            },
        )
        .unwrap();
        for p in m.predict(&recs) {
            assert!((p - 120.0).abs() < 0.1, "{p}");
        }
    }

    #[test]
    fn mlp_fits_free_space_and_is_deterministic() {
        let mk = |k: usize, off: f64| -> Vec<LinkRecord> {
            (0..k)
                .map(|i| {
                    let d = 10f64.powf(1.0 + 2.0 * (i as f64 + off) / k as f64);
                    let mut r = link(d, true, 0.0);
                    r.pathloss_db = fspl_db(r.distance_3d_m, 28e9).unwrap();
                    r
                })
                .collect()
        };
        let train = mk(400, 0.0);
        let test = mk(97, 0.37);
        let cfg = MlpConfig {
            steps: 2000,
            ..MlpConfig::default()
        };
        let m = DistanceMlp::train(&train, cfg).unwrap();
        let pred = m.predict(&test);
        let mse = pred
            .iter()
            .zip(&test)
            .map(|(p, r)| (p - r.pathloss_db).powi(2))
            .sum::<f64>()
            / test.len() as f64;
        assert!(mse.sqrt() < 0.5, "rmse {}", mse.sqrt());
        assert_eq!(DistanceMlp::train(&train, cfg).unwrap(), m);
    }
}
