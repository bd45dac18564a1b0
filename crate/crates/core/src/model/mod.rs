//! Decoder-only transformer: configuration, checkpoints and the forward pass.

mod checkpoint;
mod config;
mod generate;
mod transformer;

pub use checkpoint::{init_model, Checkpoint, FORMAT_VERSION, INIT_STD, MAGIC};
pub(crate) use checkpoint::{decode_container, encode_container};
pub use config::{ModelConfig, MoeConfig, FFN_PARTS};
pub use generate::{perplexity, DecodeConfig};
pub use transformer::{
    bind_constants, bind_params, causal_self_attention, check_batch, forward, gated_ffn,
    log_softmax_at, rope_tables, AttentionWeights, ForwardOutput, ParamVars, Rope, NORM_EPS,
    ROPE_BASE,
};

use thiserror::Error;

use crate::moe::MoeError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("batch sequences must share one length")]
    RaggedBatch,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    WrongShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
