//! Config-driven end-to-end runs: data → base → branch → merge → SFT → DPO →
//! evaluation → routing analysis.

mod config;
mod run;
pub mod synth;

pub use config::{
    locate, validate_config, DataSettings, DpoPreset, EvalSettings, ExperimentConfig, Issue, MergeSettings,
    MergeVariant, StagePreset, StagePresets, ValidationReport, PROFILES,
};
pub use run::{
    parse_stages, run_pipeline, script_traces, sha256_hex, Manifest, RunSummary, StageRecord, StageStatus, BRANCHES,
    MANIFEST, STAGES,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n{0}")]
    Invalid(ValidationReport),
    #[error("missing stage input: {0}")]
    MissingInput(String),
    #[error("unknown stage {name:?}; expected one of {}", STAGES.join(", "), name = .0)]
    UnknownStage(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("stage {stage}: training diverged at step {step}")]
    Divergence { stage: String, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
