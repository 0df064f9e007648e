//! Dataset splitting, surrogate training, evaluation reports and radio-map
//! rendering.

mod metrics;
mod render;
mod split;
mod trainer;

pub use metrics::{
    cdf_csv, evaluate, load_predictions, predictions_from_jsonl, predictions_to_jsonl,
    save_predictions, ErrorStats, EvalReport, Prediction, ReportEntry,
};
pub use render::{
    render_radiomap, GppPredictor, LinkPredictor, OraclePredictor, RadioMap, RenderParams,
    SurrogatePredictor, MASKED_SENTINEL_DB,
};
pub use split::{assign_areas, load_splits, make_splits, save_splits, SplitPlan, Splits};
pub use trainer::{extract_inputs, train, HistoryEntry, TrainConfig, TrainOutcome};

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::extract::ExtractError;
use crate::model::ModelError;
use crate::oracle::OracleError;
use crate::scene::{Scene, SceneError};

#[derive(Debug, Error)]
pub enum TrainEvalError {
    #[error("invalid split plan: {0}")]
    Plan(String),
    #[error("area {0} has no links")]
    EmptyArea(usize),
    #[error(
        "predictions do not match ground truth: {} missing (first: link {}), {} unexpected, {} scene-id mismatches",
        missing.len(),
        missing.first().map_or("-".to_string(), |i| i.to_string()),
        extra.len(),
        scene_mismatch.len()
    )]
    Mismatch {
        missing: Vec<usize>,
        extra: Vec<usize>,
        scene_mismatch: Vec<usize>,
    },
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("link {link}: {source}")]
    Extract {
        link: usize,
        #[source]
        source: ExtractError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, TrainEvalError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> TrainEvalError {
    let path = path.into();
    move |source| TrainEvalError::Io { path, source }
}

/// Scenes keyed by id.
#[derive(Debug, Clone, Default)]
pub struct SceneSet(BTreeMap<String, Scene>);

impl SceneSet {
    pub fn new(scenes: impl IntoIterator<Item = Scene>) -> Self {
        SceneSet(scenes.into_iter().map(|s| (s.id.clone(), s)).collect())
    }

    pub fn get(&self, id: &str) -> Result<&Scene> {
        self.0
            .get(id)
            .ok_or_else(|| TrainEvalError::UnknownScene(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Scene> {
        self.0.values()
    }
}
