//! Link-level mmWave path-loss prediction: synthetic scenes with a ray-based
//! ground-truth oracle, transmitter-aligned map extraction, a transformer
//! surrogate that accepts variable-height maps, an analytic 3GPP baseline,
//! and evaluation/rendering tools.

pub mod autodiff;
pub mod baselines;
pub mod extract;
pub mod model;
pub mod oracle;
pub mod scene;
pub mod selftest;
pub mod train_eval;

pub use oracle::{
    fspl_db, los_clear, path_loss, GenParams, LinkOutcome, Oracle, OracleConfig, OracleError,
};
pub use scene::{distance_3d, load_scene, save_scene, LinkRecord, Point3, Scene, SceneError};
