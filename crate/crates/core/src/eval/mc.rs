use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{Conversation, Message};
use crate::model::{Checkpoint, ModelError};
use crate::tensor::Element;
use crate::tokenizer::{encode, encode_chat_prompt, BEGIN};

/// Anything that can score a completion given a context.
pub trait Scorer {
    fn max_context(&self) -> usize;
    /// Summed log-probability of `completion` after `context`.
    fn logprob(&self, context: &[u32], completion: &[u32]) -> Result<f64, ModelError>;
}

impl<T: Element> Scorer for Checkpoint<T> {
    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn logprob(&self, context: &[u32], completion: &[u32]) -> Result<f64, ModelError> {
        self.continuation_logprob(context, completion)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTask {
    pub context: String,
    pub choices: Vec<String>,
    pub gold: usize,
    #[serde(default)]
    pub apply_chat_template: bool,
}

impl McTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.choices.len() < 2 {
            return Err(EvalError::InvalidTask(format!("{} choices, need at least 2", self.choices.len())));
        }
        if self.gold >= self.choices.len() {
            return Err(EvalError::InvalidTask(format!(
                "gold index {} out of {} choices",
                self.gold,
                self.choices.len()
            )));
        }
        Ok(())
    }

    /// Context tokens: a chat prompt whose user turn is the context, or the
    /// raw text after `BEGIN`.
    pub fn context_tokens(&self) -> Vec<u32> {
        if self.apply_chat_template {
            encode_chat_prompt(&Conversation::new(vec![Message::user(self.context.clone())]))
        } else {
            let mut t = vec![BEGIN];
            t.extend(encode(&self.context));
            t
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Raw,
    /// Log-likelihood divided by the choice's character count.
    Normalized,
}

/// Per-choice scores under `mode`.
pub fn choice_scores<S: Scorer + ?Sized>(model: &S, task: &McTask, mode: ScoreMode) -> Result<Vec<f64>, EvalError> {
    task.validate()?;
    let ctx = task.context_tokens();
    task.choices
        .iter()
        .map(|choice| {
            let completion = encode(choice);
            let len = ctx.len() + completion.len();
            if len > model.max_context() {
                return Err(ModelError::ContextOverflow {
                    len,
                    max: model.max_context(),
                }
                .into());
            }
            let lp = model.logprob(&ctx, &completion)?;
            Ok(match mode {
                ScoreMode::Raw => lp,
                ScoreMode::Normalized => lp / choice.chars().count().max(1) as f64,
            })
        })
        .collect()
}

/// Index of the best-scoring choice; ties go to the lowest index.
pub fn mc_score<S: Scorer + ?Sized>(model: &S, task: &McTask, mode: ScoreMode) -> Result<usize, EvalError> {
    let scores = choice_scores(model, task, mode)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of tasks whose chosen index equals the gold index.
pub fn accuracy<S: Scorer + ?Sized>(model: &S, tasks: &[McTask], mode: ScoreMode) -> Result<f64, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut correct = 0;
    for t in tasks {
        if mc_score(model, t, mode)? == t.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every token has probability 1/V.
    struct Uniform(usize);

    impl Scorer for Uniform {
        fn max_context(&self) -> usize {
            self.0
        }
        fn logprob(&self, _: &[u32], completion: &[u32]) -> Result<f64, ModelError> {
            Ok(-(completion.len() as f64) * 260f64.ln())
        }
    }

    fn task(choices: &[&str]) -> McTask {
        McTask {
            context: "ctx".into(),
            choices: choices.iter().map(|c| c.to_string()).collect(),
            gold: 0,
            apply_chat_template: false,
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(mc_score(&Uniform(64), &task(&["same", "same"]), ScoreMode::Raw).unwrap(), 0);
    }

    #[test]
    fn normalization_flips_length_skewed_choice() {
        // "حا": 4 byte tokens, 2 chars. "abcde": 5 tokens, 5 chars.
        let t = task(&["حا", "abcde"]);
        assert_eq!(mc_score(&Uniform(64), &t, ScoreMode::Raw).unwrap(), 0);
        assert_eq!(mc_score(&Uniform(64), &t, ScoreMode::Normalized).unwrap(), 1);
    }

    #[test]
    fn overflow_and_invalid() {
        assert!(matches!(
            mc_score(&Uniform(4), &task(&["abcdef", "x"]), ScoreMode::Raw),
            Err(EvalError::Model(ModelError::ContextOverflow { .. }))
        ));
        assert!(mc_score(&Uniform(64), &task(&["x"]), ScoreMode::Raw).is_err());
    }
}
