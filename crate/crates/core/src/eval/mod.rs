//! Likelihood-based multiple choice, BLEU/chrF and routing analytics.

mod bench;
mod mc;
mod metrics;
mod routing;

pub use bench::{
    run_benchmark, BenchTask, GenItem, MetricReport, SuiteEntry, SuiteManifest, SuiteTaskType, TaskKind, TaskResult,
};
pub use mc::{accuracy, choice_scores, mc_score, McTask, ScoreMode, Scorer};
pub use metrics::{bleu, chrf, chrf_sentence, BLEU_EPSILON, BLEU_MAX_ORDER, CHRF_BETA, CHRF_MAX_ORDER};
pub use routing::{routing_stats, specialization_score, RoutingStats};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{candidates} candidates but {references} references")]
    CountMismatch { candidates: usize, references: usize },
    #[error("no candidate/reference pairs")]
    EmptyCorpus,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("routing trace has no labeled tokens")]
    EmptyTrace,
    #[error("routing: {0}")]
    Routing(String),
    #[error("empty evaluation suite")]
    EmptySuite,
    #[error("suite: {0}")]
    Suite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
