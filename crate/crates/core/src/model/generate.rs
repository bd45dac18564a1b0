use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{log_softmax_at, Checkpoint, ModelError};
use crate::tensor::Element;
use crate::tokenizer::END;

/// Decoding settings. A temperature of zero decodes greedily.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl<T: Element> Checkpoint<T> {
    /// Continue `prompt` until `END` or `max_new_tokens`; returns only the
    /// new tokens, without the terminating `END`.
    pub fn generate(&self, prompt: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let need = prompt.len() + cfg.max_new_tokens;
        if need > self.config.max_context {
            return Err(ModelError::ContextOverflow {
                len: need,
                max: self.config.max_context,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seq = prompt.to_vec();
        let v = self.config.vocab_size;
        for _ in 0..cfg.max_new_tokens {
            let logits = self.forward_logits(&[seq.clone()])?;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = if cfg.temperature <= 0.0 {
                argmax(last)
            } else {
                sample(last, cfg.temperature, &mut rng)
            };
            if next == END {
                break;
            }
            seq.push(next);
        }
        Ok(seq.split_off(prompt.len()))
    }

    /// Summed log-probability of `completion` following `context`.
    pub fn continuation_logprob(&self, context: &[u32], completion: &[u32]) -> Result<f64, ModelError> {
        let mut seq = context.to_vec();
        seq.extend_from_slice(completion);
        let lp = self.next_token_logprobs(&seq)?;
        Ok(lp[context.len().saturating_sub(1)..].iter().sum())
    }
}

fn argmax<T: Element>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample<T: Element>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let scaled: Vec<f64> = row.iter().map(|v| v.to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// `exp` of the mean next-token negative log-likelihood over `documents`.
/// Documents longer than the context are scored in consecutive windows.
pub fn perplexity<T: Element>(model: &Checkpoint<T>, documents: &[Vec<u32>]) -> Result<f64, ModelError> {
    let ctx = model.config.max_context;
    let mut nll = 0.0;
    let mut count = 0usize;
    for doc in documents {
        for window in doc.chunks(ctx) {
            if window.len() < 2 {
                continue;
            }
            let logits = model.forward_logits(&[window.to_vec()])?;
            let v = model.config.vocab_size;
            for i in 0..window.len() - 1 {
                nll -= log_softmax_at(&logits.data()[i * v..(i + 1) * v], window[i + 1] as usize);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyInput);
    }
    Ok((nll / count as f64).exp())
}
