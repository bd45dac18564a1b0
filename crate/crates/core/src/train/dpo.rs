use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{code_switch_eligible, correct_text, Conversation, Message, Role, TransliterationTable};
use crate::model::{Checkpoint, DecodeConfig, ModelError};
use crate::tensor::{Element, Tape, Var};
use crate::tokenizer::{decode, encode_chat_prompt, END};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    /// Preference temperature β.
    pub beta: f64,
    /// Train every weight; otherwise a LoRA config is required.
    #[serde(default = "yes")]
    pub full_finetune: bool,
}

fn yes() -> bool {
    true
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            full_finetune: true,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TrainError::InvalidConfig("dpo beta must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Conversation,
    pub chosen: String,
    pub rejected: String,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.chosen == self.rejected {
            return Err(TrainError::InvalidPair("chosen equals rejected".into()));
        }
        if self.prompt.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(TrainError::InvalidPair("prompt must end with a user message".into()));
        }
        Ok(())
    }
}

/// Prompt with an open assistant header, the completion bytes and `END`.
/// The mask marks next-token positions whose target lies in the completion.
pub fn completion_encoding(prompt: &Conversation, completion: &str) -> (Vec<u32>, Vec<bool>) {
    let mut tokens = encode_chat_prompt(prompt);
    let start = tokens.len();
    tokens.extend(completion.bytes().map(u32::from));
    tokens.push(END);
    let mask = (1..tokens.len()).map(|i| i >= start).collect();
    (tokens, mask)
}

/// Summed log-probability of the completion tokens (including `END`).
pub fn sequence_logprob<T: Element>(model: &Checkpoint<T>, prompt: &Conversation, completion: &str) -> Result<f64, TrainError> {
    let (tokens, mask) = completion_encoding(prompt, completion);
    if tokens.len() - 1 > model.config.max_context {
        return Err(ModelError::ContextOverflow {
            len: tokens.len() - 1,
            max: model.config.max_context,
        }
        .into());
    }
    let lp = model.next_token_logprobs(&tokens[..])?;
    Ok(lp.iter().zip(&mask).filter(|(_, &m)| m).map(|(l, _)| l).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    margin: f64,
}

impl DpoLoss {
    /// The pre-sigmoid argument `β·[(π_w − ref_w) − (π_l − ref_l)]`.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn from_logprobs(policy: (f64, f64), reference: (f64, f64), beta: f64) -> Self {
        let margin = beta * ((policy.0 - reference.0) - (policy.1 - reference.1));
        Self {
            loss: softplus(-margin),
            margin,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn dpo_loss<T: Element>(
    policy: &Checkpoint<T>,
    reference: &Checkpoint<T>,
    pair: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<DpoLoss, TrainError> {
    cfg.validate()?;
    let p = (
        sequence_logprob(policy, &pair.prompt, &pair.chosen)?,
        sequence_logprob(policy, &pair.prompt, &pair.rejected)?,
    );
    let r = (
        sequence_logprob(reference, &pair.prompt, &pair.chosen)?,
        sequence_logprob(reference, &pair.prompt, &pair.rejected)?,
    );
    Ok(DpoLoss::from_logprobs(p, r, cfg.beta))
}

/// Summed completion log-probability of row `row` of flattened `[rows·len, V]`
/// logits, as a rank-0 tape value.
pub(crate) fn tape_sequence_logprob<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    row: usize,
    len: usize,
    tokens: &[u32],
    mask: &[bool],
) -> Result<Var, TrainError> {
    let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let rows: Vec<usize> = positions.iter().map(|&i| row * len + i).collect();
    let targets: Vec<usize> = positions.iter().map(|&i| tokens[i + 1] as usize).collect();
    let picked = tape.gather_rows(logits, &rows)?;
    let ce = tape.cross_entropy(picked, &targets, &vec![true; rows.len()])?;
    Ok(tape.scale(ce, -(rows.len() as f64))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Chosen: the reference answer; rejected: a policy sample at temperature 1.
    OnPolicy,
    /// Chosen: the corrector's rewrite of a code-switched answer; rejected: the original.
    OffPolicy,
}

/// Build preference pairs from single- or multi-turn SFT conversations whose
/// final message is the assistant's answer.
pub fn build_preference_pairs<T: Element>(
    sft_data: &[Conversation],
    policy: Option<&Checkpoint<T>>,
    mode: PairMode,
    table: &TransliterationTable,
    seed: u64,
) -> Result<Vec<PreferencePair>, TrainError> {
    let mut pairs = Vec::new();
    for (i, conv) in sft_data.iter().enumerate() {
        let Some((last, prompt)) = conv.messages.split_last() else {
            continue;
        };
        if last.role != Role::Assistant || prompt.last().map(|m| m.role) != Some(Role::User) {
            continue;
        }
        let prompt = Conversation::new(prompt.to_vec());
        let pair = match mode {
            PairMode::OffPolicy => {
                if !code_switch_eligible(&last.content) {
                    continue;
                }
                PreferencePair {
                    prompt,
                    chosen: correct_text(&last.content, table),
                    rejected: last.content.clone(),
                }
            }
            PairMode::OnPolicy => {
                let model = policy.ok_or_else(|| TrainError::InvalidConfig("on-policy pairs need a policy model".into()))?;
                let prompt_tokens = encode_chat_prompt(&prompt);
                let room = model.config.max_context.saturating_sub(prompt_tokens.len());
                let budget = (last.content.len() * 2).max(8).min(room);
                if budget == 0 {
                    continue;
                }
                let sample = model.generate(
                    &prompt_tokens,
                    &DecodeConfig {
                        max_new_tokens: budget,
                        temperature: 1.0,
                        seed: seed.wrapping_add(i as u64),
                    },
                )?;
                PreferencePair {
                    prompt,
                    chosen: last.content.clone(),
                    rejected: decode(&sample),
                }
            }
        };
        if pair.chosen != pair.rejected {
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    Ok(pairs)
}

impl PreferencePair {
    /// The preferred exchange as a complete conversation.
    pub fn chosen_conversation(&self) -> Conversation {
        let mut c = self.prompt.clone();
        c.push(Message::assistant(self.chosen.clone()));
        c
    }
}
