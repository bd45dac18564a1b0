use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dpo::{completion_encoding, sequence_logprob, tape_sequence_logprob};
use super::{lm_loss, lr_schedule, AdamW, DpoConfig, LmBatch, LoraAdapter, LoraConfig, OptimConfig, PreferencePair, TrainError};
use crate::data::Conversation;
use crate::model::{bind_params, forward, Checkpoint, ModelError};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use crate::tokenizer::PAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cpt,
    Anneal,
    Sft,
    Dpo,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Cpt => "cpt",
            Stage::Anneal => "anneal",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub enum TrainData {
    /// Token streams (one per document) for `cpt` and `anneal`.
    Documents(Vec<Vec<u32>>),
    Conversations(Vec<Conversation>),
    Preferences(Vec<PreferencePair>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub optim: OptimConfig,
    pub lora: Option<LoraConfig>,
    pub dpo: Option<DpoConfig>,
    /// Window length for token-stream stages.
    pub seq_len: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage, optim: OptimConfig, seed: u64) -> Self {
        Self {
            stage,
            optim,
            lora: None,
            dpo: (stage == Stage::Dpo).then(DpoConfig::default),
            seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.optim.validate()?;
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        if self.seq_len == 0 {
            return Err(TrainError::InvalidConfig("seq_len must be >= 1".into()));
        }
        if self.stage == Stage::Dpo {
            let dpo = self
                .dpo
                .as_ref()
                .ok_or_else(|| TrainError::InvalidConfig("dpo stage needs a dpo config".into()))?;
            dpo.validate()?;
            if !dpo.full_finetune && self.lora.is_none() {
                return Err(TrainError::InvalidConfig(
                    "dpo without full_finetune needs a lora config".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub aux_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub const HEADER: &'static str = "step\tstage\tlr\tloss\taux_loss";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for p in &self.points {
            let _ = writeln!(out, "{}\t{}\t{:e}\t{}\t{}", p.step, p.stage, p.lr, p.loss, p.aux_loss);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.loss.is_finite() && p.aux_loss.is_finite())
    }

    /// Mean loss over the first and last `n` points.
    pub fn endpoints(&self, n: usize) -> Option<(f64, f64)> {
        let k = n.min(self.points.len());
        if k == 0 {
            return None;
        }
        let mean = |s: &[CurvePoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.points[..k]), mean(&self.points[self.points.len() - k..])))
    }
}

pub struct TrainOutput<T> {
    /// Updated weights; under LoRA only routers differ from the input.
    pub checkpoint: Checkpoint<T>,
    pub adapter: Option<LoraAdapter<T>>,
    pub curve: LossCurve,
}

impl<T: Element> TrainOutput<T> {
    /// Dense weights with any adapter folded in.
    pub fn folded(&self) -> Result<Checkpoint<T>, crate::merge::MergeError> {
        match &self.adapter {
            Some(a) => crate::merge::materialize_lora(&self.checkpoint, a),
            None => Ok(self.checkpoint.clone()),
        }
    }
}

/// Training examples after stage-specific preparation.
enum Items<'a> {
    Windows(Vec<&'a [u32]>),
    Conversations(&'a [Conversation]),
    Pairs {
        pairs: &'a [PreferencePair],
        reference: Vec<(f64, f64)>,
        beta: f64,
    },
}

impl Items<'_> {
    fn len(&self) -> usize {
        match self {
            Items::Windows(w) => w.len(),
            Items::Conversations(c) => c.len(),
            Items::Pairs { pairs, .. } => pairs.len(),
        }
    }
}

fn windows(docs: &[Vec<u32>], seq_len: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    for doc in docs {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + seq_len + 1).min(doc.len());
            out.push(&doc[start..end]);
            start += seq_len;
        }
    }
    out
}

pub fn train_stage<T: Element>(
    ckpt: &Checkpoint<T>,
    data: &TrainData,
    cfg: &StageConfig,
) -> Result<TrainOutput<T>, TrainError> {
    cfg.validate()?;
    let max_context = ckpt.config.max_context;
    let items = match (cfg.stage, data) {
        (Stage::Cpt | Stage::Anneal, TrainData::Documents(docs)) => {
            if cfg.seq_len > max_context {
                return Err(TrainError::InvalidConfig(format!(
                    "seq_len {} exceeds max_context {max_context}",
                    cfg.seq_len
                )));
            }
            Items::Windows(windows(docs, cfg.seq_len))
        }
        (Stage::Sft, TrainData::Conversations(c)) => Items::Conversations(c),
        (Stage::Dpo, TrainData::Preferences(pairs)) => {
            let mut reference = Vec::with_capacity(pairs.len());
            for p in pairs {
                p.validate()?;
                reference.push((
                    sequence_logprob(ckpt, &p.prompt, &p.chosen)?,
                    sequence_logprob(ckpt, &p.prompt, &p.rejected)?,
                ));
            }
            let beta = cfg.dpo.as_ref().map_or(0.5, |d| d.beta);
            Items::Pairs { pairs, reference, beta }
        }
        (stage, _) => {
            let expected = match stage {
                Stage::Cpt | Stage::Anneal => "token documents",
                Stage::Sft => "conversations",
                Stage::Dpo => "preference pairs",
            };
            return Err(TrainError::WrongData { stage, expected });
        }
    };
    let n_items = items.len();
    if n_items == 0 {
        return Err(TrainError::EmptyDataset);
    }

    let optim = &cfg.optim;
    let batch = optim.effective_batch;
    let total_steps = optim
        .max_steps
        .unwrap_or_else(|| ((optim.epochs * n_items as f64) / batch as f64).ceil().max(1.0) as usize);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut next_batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if cursor == order.len() {
                    order = (0..n_items).collect();
                    order.shuffle(rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect()
    };

    let mut model = ckpt.clone();
    let mut adapter = match &cfg.lora {
        Some(l) => Some(LoraAdapter::init(ckpt, l, cfg.seed ^ 0x4c6f_5241)?),
        None => None,
    };
    let trainable = |name: &str| adapter_is_none_or_router(cfg.lora.is_none(), name);
    let lb_coeff = ckpt.config.moe.as_ref().map_or(0.0, |m| m.lb_coeff);
    let mut opt = AdamW::new(optim);
    let mut curve = LossCurve::default();

    for step in 1..=total_steps {
        let lr = lr_schedule(step, total_steps, optim)?;
        let chosen = next_batch(&mut rng);
        let micro = optim.micro_batch();
        let chunks: Vec<&[usize]> = chosen.chunks(micro).collect();
        let weights = chunk_weights(&items, &chunks, max_context)?;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let (mut loss_sum, mut aux_sum) = (0.0, 0.0);

        for (chunk, &w) in chunks.iter().zip(&weights) {
            let mut tape = Tape::new();
            let mut params = bind_params(&mut tape, &model, &trainable)?;
            let mut leaves: BTreeMap<String, Var> = params
                .iter()
                .filter(|(n, _)| trainable(n))
                .map(|(n, v)| (n.clone(), *v))
                .collect();
            if let Some(a) = &adapter {
                leaves.extend(a.bind(&mut tape, &mut params)?);
            }
            let (main, aux) = chunk_loss(&mut tape, &model, &params, &items, chunk, max_context)
                .map_err(|e| divergence(e, cfg.stage, step))?;
            loss_sum += w * tape.value(main).item().to_f64_lossy();
            let mut total = tape.scale(main, w)?;
            if let Some(aux) = aux {
                aux_sum += w * tape.value(aux).item().to_f64_lossy();
                let a = tape.scale(aux, w * lb_coeff)?;
                total = tape.add(total, a)?;
            }
            let mut g = tape.backward(total).map_err(|e| divergence(e.into(), cfg.stage, step))?;
            for (name, var) in leaves {
                if let Some(gt) = g.take(var) {
                    match grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                                *a = *a + *b;
                            }
                        }
                        None => {
                            grads.insert(name, gt);
                        }
                    }
                }
            }
        }
        if !loss_sum.is_finite() || !aux_sum.is_finite() {
            return Err(TrainError::Divergence { stage: cfg.stage, step });
        }
        curve.points.push(CurvePoint {
            step,
            stage: cfg.stage,
            lr,
            loss: loss_sum,
            aux_loss: aux_sum,
        });

        let mut adapter_params: Vec<(String, &mut Tensor<T>)> = match &mut adapter {
            Some(a) => a
                .pairs
                .iter_mut()
                .flat_map(|(n, (pa, pb))| [(lora_key(n, "a"), pa), (lora_key(n, "b"), pb)])
                .collect(),
            None => Vec::new(),
        };
        let params = model
            .tensors
            .iter_mut()
            .filter(|(n, _)| trainable(n))
            .map(|(n, t)| (n.as_str(), t))
            .chain(adapter_params.iter_mut().map(|(k, t)| (k.as_str(), &mut **t)));
        opt.step(params, &grads, lr)?;
        if model.tensors.values().any(|t| !t.all_finite()) {
            return Err(TrainError::Divergence { stage: cfg.stage, step });
        }
    }
    model.metadata = format!("{}:{}", cfg.stage, ckpt.metadata);
    Ok(TrainOutput {
        checkpoint: model,
        adapter,
        curve,
    })
}

fn lora_key(weight: &str, part: &str) -> String {
    format!("{weight}.lora_{part}")
}

fn adapter_is_none_or_router(full: bool, name: &str) -> bool {
    full || name.ends_with(".moe.router")
}

fn divergence(e: TrainError, stage: Stage, step: usize) -> TrainError {
    match e {
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => TrainError::Divergence { stage, step },
        other => other,
    }
}

/// Micro-batch weights proportional to supervised tokens (pairs for DPO), so
/// accumulated gradients equal the full-batch gradient.
fn chunk_weights(items: &Items<'_>, chunks: &[&[usize]], max_context: usize) -> Result<Vec<f64>, TrainError> {
    let counts: Vec<usize> = chunks
        .iter()
        .map(|chunk| -> Result<usize, TrainError> {
            Ok(match items {
                Items::Windows(w) => chunk.iter().map(|&i| w[i].len() - 1).sum(),
                Items::Conversations(c) => {
                    let sel: Vec<&Conversation> = chunk.iter().map(|&i| &c[i]).collect();
                    LmBatch::from_conversations(&sel, max_context)?.supervised_tokens()
                }
                Items::Pairs { .. } => chunk.len(),
            })
        })
        .collect::<Result<_, _>>()?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TensorError::EmptyLossSupport.into());
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn chunk_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &Checkpoint<T>,
    params: &crate::model::ParamVars,
    items: &Items<'_>,
    chunk: &[usize],
    max_context: usize,
) -> Result<(Var, Option<Var>), TrainError> {
    match items {
        Items::Windows(w) => {
            let sel: Vec<&[u32]> = chunk.iter().map(|&i| w[i]).collect();
            let parts = lm_loss(tape, &model.config, params, &LmBatch::from_windows(&sel))?;
            Ok((parts.ce, parts.aux))
        }
        Items::Conversations(c) => {
            let sel: Vec<&Conversation> = chunk.iter().map(|&i| &c[i]).collect();
            let batch = LmBatch::from_conversations(&sel, max_context)?;
            let parts = lm_loss(tape, &model.config, params, &batch)?;
            Ok((parts.ce, parts.aux))
        }
        Items::Pairs { pairs, reference, beta } => {
            let mut seqs = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk.iter() {
                seqs.push(completion_encoding(&pairs[i].prompt, &pairs[i].chosen));
                seqs.push(completion_encoding(&pairs[i].prompt, &pairs[i].rejected));
            }
            let len = seqs.iter().map(|(t, _)| t.len() - 1).max().unwrap_or(0);
            if len > max_context {
                return Err(ModelError::ContextOverflow { len, max: max_context }.into());
            }
            let inputs: Vec<Vec<u32>> = seqs
                .iter()
                .map(|(t, _)| {
                    let mut x = t[..t.len() - 1].to_vec();
                    x.resize(len, PAD);
                    x
                })
                .collect();
            let out = forward(tape, &model.config, params, &inputs)?;
            let logits = tape.reshape(out.logits, &[inputs.len() * len, model.config.vocab_size])?;
            let mut losses = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let (tw, mw) = &seqs[2 * j];
                let (tl, ml) = &seqs[2 * j + 1];
                let lw = tape_sequence_logprob(tape, logits, 2 * j, len, tw, mw)?;
                let ll = tape_sequence_logprob(tape, logits, 2 * j + 1, len, tl, ml)?;
                let (rw, rl) = reference[i];
                let diff = tape.sub(lw, ll)?;
                let shift = tape.constant(Tensor::scalar(T::from_f64_lossy(-(rw - rl))))?;
                let diff = tape.add(diff, shift)?;
                let margin = tape.scale(diff, *beta)?;
                let s = tape.sigmoid(margin)?;
                let ls = tape.log(s)?;
                losses.push(tape.scale(ls, -1.0)?);
            }
            let mut acc = losses[0];
            for &l in &losses[1..] {
                acc = tape.add(acc, l)?;
            }
            let mean = tape.scale(acc, 1.0 / losses.len() as f64)?;
            Ok((mean, out.aux_loss))
        }
    }
}
