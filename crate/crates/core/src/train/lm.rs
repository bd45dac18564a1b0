use super::TrainError;
use crate::data::{Conversation, Role};
use crate::model::{forward, Checkpoint, ModelConfig, ModelError, ParamVars, bind_constants};
use crate::moe::RoutingTrace;
use crate::tensor::{Element, Tape, TensorError, Var};
use crate::tokenizer::{encode_chat, PAD};

/// Right-padded next-token batch. `targets` and `mask` are flattened over
/// `rows × len`; `mask` marks the supervised positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl LmBatch {
    /// Fully supervised windows; each window of `L + 1` tokens yields `L` predictions.
    pub fn from_windows(windows: &[&[u32]]) -> Self {
        let len = windows.iter().map(|w| w.len().saturating_sub(1)).max().unwrap_or(0);
        let mut b = Self::empty();
        for w in windows {
            let n = w.len().saturating_sub(1);
            let mut input = w[..n].to_vec();
            input.resize(len, PAD);
            b.inputs.push(input);
            for i in 0..len {
                b.targets.push(if i < n { w[i + 1] as usize } else { 0 });
                b.mask.push(i < n);
            }
        }
        b
    }

    /// Response-only supervision over chat serializations.
    pub fn from_conversations(convs: &[&Conversation], max_context: usize) -> Result<Self, TrainError> {
        let encs: Vec<_> = convs.iter().map(|c| encode_chat(c)).collect();
        let len = encs.iter().map(|e| e.tokens.len() - 1).max().unwrap_or(0);
        if len > max_context {
            return Err(ModelError::ContextOverflow { len, max: max_context }.into());
        }
        let mut b = Self::empty();
        for (conv, enc) in convs.iter().zip(&encs) {
            let content: usize = conv
                .messages
                .iter()
                .filter(|m| m.role == Role::Assistant)
                .map(|m| m.content.len())
                .sum();
            if content == 0 {
                return Err(TensorError::EmptyLossSupport.into());
            }
            let (targets, mask) = enc.targets_and_mask();
            let n = targets.len();
            let mut input = enc.tokens[..n].to_vec();
            input.resize(len, PAD);
            b.inputs.push(input);
            for i in 0..len {
                b.targets.push(if i < n { targets[i] as usize } else { 0 });
                b.mask.push(i < n && mask[i]);
            }
        }
        Ok(b)
    }

    fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn supervised_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub struct LossParts {
    /// `[rows·len, V]`
    pub logits: Var,
    /// Mean cross-entropy over supervised positions.
    pub ce: Var,
    pub aux: Option<Var>,
    pub routing: Vec<RoutingTrace>,
}

pub fn lm_loss<T: Element>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ParamVars,
    batch: &LmBatch,
) -> Result<LossParts, TrainError> {
    let out = forward(tape, config, params, &batch.inputs)?;
    let logits = tape.reshape(out.logits, &[batch.targets.len(), config.vocab_size])?;
    let ce = tape.cross_entropy(logits, &batch.targets, &batch.mask)?;
    Ok(LossParts {
        logits,
        ce,
        aux: out.aux_loss,
        routing: out.routing,
    })
}

/// Response-only cross-entropy of one conversation.
pub fn sft_loss<T: Element>(model: &Checkpoint<T>, conversation: &Conversation) -> Result<f64, TrainError> {
    let batch = LmBatch::from_conversations(&[conversation], model.config.max_context)?;
    let mut tape = Tape::new();
    let params = bind_constants(&mut tape, model)?;
    let parts = lm_loss(&mut tape, &model.config, &params, &batch)?;
    Ok(tape.value(parts.ce).item().to_f64_lossy())
}
