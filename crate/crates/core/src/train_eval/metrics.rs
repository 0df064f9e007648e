use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, Result, TrainEvalError};
use crate::scene::LinkRecord;

/// One line of a prediction file. `link` is the 0-based index of the link in
/// the dataset file the prediction refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub link: usize,
    pub scene_id: String,
    pub predicted_db: f64,
}

pub fn predictions_to_jsonl(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn predictions_from_jsonl(text: &str) -> std::result::Result<Vec<Prediction>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}

pub fn save_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_jsonl(preds)).map_err(io_err(path))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| TrainEvalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Error statistics of one cell (split × LOS class). Empty cells carry no
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub rmse_db: Option<f64>,
    pub mae_db: Option<f64>,
    /// Nearest-rank quantiles of the absolute error.
    pub p50_db: Option<f64>,
    pub p90_db: Option<f64>,
    pub p95_db: Option<f64>,
    /// Sorted absolute errors, the empirical CDF.
    #[serde(skip)]
    pub abs_errors: Vec<f64>,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let k = (q * sorted.len() as f64).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        let n = errors.len();
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        if n == 0 {
            return ErrorStats {
                count: 0,
                rmse_db: None,
                mae_db: None,
                p50_db: None,
                p90_db: None,
                p95_db: None,
                abs_errors: abs,
            };
        }
        let mae = abs.iter().sum::<f64>() / n as f64;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
        // Equality up to rounding when all errors share one magnitude.
        assert!(
            mae <= rmse * (1.0 + 1e-12) + 1e-300,
            "MAE {mae} exceeds RMSE {rmse}"
        );
        ErrorStats {
            count: n,
            rmse_db: Some(rmse),
            mae_db: Some(mae),
            p50_db: Some(nearest_rank(&abs, 0.50)),
            p90_db: Some(nearest_rank(&abs, 0.90)),
            p95_db: Some(nearest_rank(&abs, 0.95)),
            abs_errors: abs,
        }
    }
}

/// Statistics of one predictor on one ground-truth set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub predictor: String,
    pub split: String,
    pub all: ErrorStats,
    pub los: ErrorStats,
    pub nlos: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<ReportEntry>,
}

impl EvalReport {
    pub fn find(&self, predictor: &str, split: &str) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.predictor == predictor && e.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Compare predictions with ground truth. Every truth link must have exactly
/// one prediction with a matching scene id, and nothing else may be present.
pub fn evaluate(
    predictor: &str,
    split: &str,
    preds: &[Prediction],
    truth: &[LinkRecord],
) -> Result<ReportEntry> {
    let mut by_link: BTreeMap<usize, &Prediction> = BTreeMap::new();
    let mut extra = Vec::new();
    for p in preds {
        if p.link >= truth.len() || by_link.insert(p.link, p).is_some() {
            extra.push(p.link);
        }
    }
    let mut missing = Vec::new();
    let mut scene_mismatch = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        match by_link.get(&i) {
            None => missing.push(i),
            Some(p) if p.scene_id != t.scene_id => scene_mismatch.push(i),
            Some(_) => {}
        }
    }
    if !(missing.is_empty() && extra.is_empty() && scene_mismatch.is_empty()) {
        return Err(TrainEvalError::Mismatch {
            missing,
            extra,
            scene_mismatch,
        });
    }
    let mut all = Vec::with_capacity(truth.len());
    let (mut los, mut nlos) = (Vec::new(), Vec::new());
    for (i, t) in truth.iter().enumerate() {
        let e = by_link[&i].predicted_db - t.pathloss_db;
        if !e.is_finite() {
            return Err(TrainEvalError::Invalid(format!(
                "link {i}: non-finite prediction"
            )));
        }
        all.push(e);
        if t.los {
            los.push(e);
        } else {
            nlos.push(e);
        }
    }
    Ok(ReportEntry {
        predictor: predictor.to_string(),
        split: split.to_string(),
        all: ErrorStats::from_errors(&all),
        los: ErrorStats::from_errors(&los),
        nlos: ErrorStats::from_errors(&nlos),
    })
}

/// Empirical CDFs of absolute errors as CSV:
/// `predictor,split,class,abs_error_db,cumulative_fraction`.
pub fn cdf_csv(report: &EvalReport) -> String {
    let mut out = String::from("predictor,split,class,abs_error_db,cumulative_fraction\n");
    for e in &report.entries {
        for (class, s) in [("all", &e.all), ("los", &e.los), ("nlos", &e.nlos)] {
            let n = s.abs_errors.len() as f64;
            for (i, v) in s.abs_errors.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{class},{v:.6},{:.6}",
                    e.predictor,
                    e.split,
                    (i + 1) as f64 / n
                )
                .unwrap();
            }
        }
    }
    out
}
