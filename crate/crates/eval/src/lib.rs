//! Faithfulness evaluation: occlude super-features in order of attributed relevance
//! and watch the classifier's accuracy fall; plus a wall-clock comparison of LRP and
//! Integrated Gradients.

pub mod bench;
pub mod perturb;

pub use bench::{timing_benchmark, BenchmarkReport};
pub use perturb::{
    occlude, perturbation_test, random_occlusion, write_curves_csv, Attribution, Method, PerturbConfig,
    PerturbationCurve, Ranking,
};

use xlane_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no correctly classified instances to perturb")]
    EmptyCorrectSet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
