//! Continual pre-training, instruction tuning and preference alignment on
//! one AdamW loop with gradient accumulation and optional LoRA adapters.

mod dpo;
mod lora;
mod lm;
mod optim;
mod stage;

pub use dpo::{
    build_preference_pairs, completion_encoding, dpo_loss, sequence_logprob, DpoConfig, DpoLoss,
    PairMode, PreferencePair,
};
pub use lm::{lm_loss, sft_loss, LmBatch, LossParts};
pub use lora::{default_targets, LoraAdapter, LoraConfig, ADAPTER_MAGIC};
pub use optim::{lr_schedule, AdamW, OptimConfig, Schedule};
pub use stage::{train_stage, CurvePoint, LossCurve, Stage, StageConfig, TrainData, TrainOutput};

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside 0..={total_steps}")]
    StepOutOfRange { step: usize, total_steps: usize },
    #[error("{name}: gradient shape {grad:?} does not match parameter {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("stage {stage} expects {expected}")]
    WrongData { stage: Stage, expected: &'static str },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("no preference pairs survive filtering")]
    NoPairs,
    #[error("training diverged in stage {stage} at step {step}")]
    Divergence { stage: Stage, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}
