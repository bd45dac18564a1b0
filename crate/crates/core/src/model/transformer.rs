//! Pre-norm decoder block stack: rms_norm → causal attention (rotary, base
//! 10000) → residual, rms_norm → gated FFN or MoE → residual, then the head.

use std::collections::BTreeMap;

use super::{Checkpoint, ModelConfig, ModelError, FFN_PARTS};
use crate::moe::{moe_forward, FfnVars, RoutingTrace};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;
const MASK_VALUE: f64 = -1e9;

/// Tape handles for every parameter a forward pass reads.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Record every checkpoint tensor on the tape; names for which `trainable`
/// holds become gradient-receiving leaves.
pub fn bind_params<T: Element>(
    tape: &mut Tape<T>,
    ckpt: &Checkpoint<T>,
    trainable: impl Fn(&str) -> bool,
) -> Result<ParamVars, ModelError> {
    let mut vars = ParamVars::default();
    for (name, t) in &ckpt.tensors {
        let v = if trainable(name) {
            tape.param(t.clone())?
        } else {
            tape.constant(t.clone())?
        };
        vars.insert(name.clone(), v);
    }
    Ok(vars)
}

pub fn bind_constants<T: Element>(
    tape: &mut Tape<T>,
    ckpt: &Checkpoint<T>,
) -> Result<ParamVars, ModelError> {
    bind_params(tape, ckpt, |_| false)
}

pub struct ForwardOutput {
    /// `[B, T, V]`
    pub logits: Var,
    /// Mean load-balancing loss over MoE layers (absent for dense models).
    pub aux_loss: Option<Var>,
    /// One trace per MoE layer; token positions index the flattened `B·T` batch.
    pub routing: Vec<RoutingTrace>,
}

pub fn check_batch(config: &ModelConfig, batch: &[Vec<u32>]) -> Result<(usize, usize), ModelError> {
    let rows = batch.len();
    let seq = batch.first().map(Vec::len).unwrap_or(0);
    if rows == 0 || seq == 0 {
        return Err(ModelError::EmptyInput);
    }
    if batch.iter().any(|s| s.len() != seq) {
        return Err(ModelError::RaggedBatch);
    }
    if seq > config.max_context {
        return Err(ModelError::ContextOverflow {
            len: seq,
            max: config.max_context,
        });
    }
    for &t in batch.iter().flatten() {
        if t as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok((rows, seq))
}

pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ParamVars,
    batch: &[Vec<u32>],
) -> Result<ForwardOutput, ModelError> {
    let (rows, seq) = check_batch(config, batch)?;
    let ids: Vec<usize> = batch.iter().flatten().map(|&t| t as usize).collect();
    let mut x = tape.gather_rows(params.get("embed.tok")?, &ids)?;
    let rope = Rope::new(tape, seq, config.head_dim())?;
    let mut aux_terms = Vec::new();
    let mut routing = Vec::new();

    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        let h = tape.rms_norm(x, params.get(&format!("{p}.norm1.gain"))?, NORM_EPS)?;
        let attn = AttentionWeights {
            q: params.get(&format!("{p}.attn.q"))?,
            k: params.get(&format!("{p}.attn.k"))?,
            v: params.get(&format!("{p}.attn.v"))?,
            o: params.get(&format!("{p}.attn.o"))?,
        };
        let a = causal_self_attention(tape, h, rows, seq, config.n_heads, &attn, &rope)?;
        x = tape.add(x, a)?;

        let h = tape.rms_norm(x, params.get(&format!("{p}.norm2.gain"))?, NORM_EPS)?;
        let f = match &config.moe {
            None => {
                let ffn = ffn_vars(params, &format!("{p}.ffn"))?;
                gated_ffn(tape, h, &ffn)?
            }
            Some(moe) => {
                let experts = (0..moe.n_experts)
                    .map(|e| ffn_vars(params, &format!("{p}.moe.expert.{e}")))
                    .collect::<Result<Vec<_>, _>>()?;
                let router = params.get(&format!("{p}.moe.router"))?;
                let out = moe_forward(tape, h, &experts, router, moe)?;
                aux_terms.push(out.aux_loss);
                routing.push(out.trace.with_layer(i));
                out.y
            }
        };
        x = tape.add(x, f)?;
    }

    let logits = tape.linear(x, params.get("head.out")?)?;
    let logits = tape.reshape(logits, &[rows, seq, config.vocab_size])?;
    let aux_loss = match aux_terms.len() {
        0 => None,
        n => {
            let mut acc = aux_terms[0];
            for &t in &aux_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(tape.scale(acc, 1.0 / n as f64)?)
        }
    };
    Ok(ForwardOutput {
        logits,
        aux_loss,
        routing,
    })
}

fn ffn_vars(params: &ParamVars, prefix: &str) -> Result<FfnVars, ModelError> {
    let [up, gate, down] = FFN_PARTS;
    Ok(FfnVars {
        up: params.get(&format!("{prefix}.{up}"))?,
        gate: params.get(&format!("{prefix}.{gate}"))?,
        down: params.get(&format!("{prefix}.{down}"))?,
    })
}

/// `down · (silu(gate · x) ⊙ up · x)` row-wise.
pub fn gated_ffn<T: Element>(tape: &mut Tape<T>, x: Var, ffn: &FfnVars) -> Result<Var, TensorError> {
    let g = tape.linear(x, ffn.gate)?;
    let g = tape.silu(g)?;
    let u = tape.linear(x, ffn.up)?;
    let hidden = tape.mul(g, u)?;
    tape.linear(hidden, ffn.down)
}

pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Rotary tables on the tape: `rot(x) = x ⊙ cos + (x · R) ⊙ sin` where `R`
/// maps `[x1, x2]` to `[-x2, x1]`.
pub struct Rope {
    cos: Var,
    sin: Var,
    rotate_half: Var,
}

impl Rope {
    pub fn new<T: Element>(tape: &mut Tape<T>, seq: usize, head_dim: usize) -> Result<Self, TensorError> {
        let (cos, sin) = rope_tables(seq, head_dim);
        let half = head_dim / 2;
        let mut r = vec![0.0; head_dim * head_dim];
        for j in 0..half {
            r[(j + half) * head_dim + j] = -1.0;
            r[j * head_dim + j + half] = 1.0;
        }
        Ok(Self {
            cos: tape.constant(Tensor::from_f64(&[seq, head_dim], &cos)?)?,
            sin: tape.constant(Tensor::from_f64(&[seq, head_dim], &sin)?)?,
            rotate_half: tape.constant(Tensor::from_f64(&[head_dim, head_dim], &r)?)?,
        })
    }

    /// `x`: `[.., seq, head_dim]`.
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let a = tape.mul(x, self.cos)?;
        let r = tape.matmul(x, self.rotate_half)?;
        let b = tape.mul(r, self.sin)?;
        tape.add(a, b)
    }
}

/// Row-major `[seq, head_dim]` cos/sin tables; dimension `j` and `j + half`
/// share frequency `base^(-2j/head_dim)`.
pub fn rope_tables(seq: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * head_dim);
    let mut sin = Vec::with_capacity(seq * head_dim);
    for pos in 0..seq {
        for j in 0..head_dim {
            let freq = ROPE_BASE.powf(-2.0 * (j % half) as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Multi-head causal self-attention over `h: [rows·seq, d]`.
pub fn causal_self_attention<T: Element>(
    tape: &mut Tape<T>,
    h: Var,
    rows: usize,
    seq: usize,
    n_heads: usize,
    w: &AttentionWeights,
    rope: &Rope,
) -> Result<Var, TensorError> {
    let d = tape.shape(h)[1];
    let hd = d / n_heads;
    let split = |tape: &mut Tape<T>, x: Var| -> Result<Var, TensorError> {
        let x = tape.reshape(x, &[rows, seq, n_heads, hd])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[rows * n_heads, seq, hd])
    };
    let q = tape.linear(h, w.q)?;
    let q = split(tape, q)?;
    let q = rope.apply(tape, q)?;
    let k = tape.linear(h, w.k)?;
    let k = split(tape, k)?;
    let k = rope.apply(tape, k)?;
    let v = tape.linear(h, w.v)?;
    let v = split(tape, v)?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let mask = Tensor::from_fn(&[seq, seq], |i| {
        if i % seq > i / seq {
            T::from_f64_lossy(MASK_VALUE)
        } else {
            T::zero()
        }
    });
    let mask = tape.constant(mask)?;
    let scores = tape.add(scores, mask)?;
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.reshape(ctx, &[rows, n_heads, seq, hd])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[rows * seq, d])?;
    tape.linear(ctx, w.o)
}

impl<T: Element> Checkpoint<T> {
    /// Inference-only logits `[B, T, V]`.
    pub fn forward_logits(&self, batch: &[Vec<u32>]) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_full(batch)?.0)
    }

    /// Logits plus the per-layer routing traces (empty for dense models).
    pub fn forward_full(&self, batch: &[Vec<u32>]) -> Result<(Tensor<T>, Vec<RoutingTrace>), ModelError> {
        let mut tape = Tape::new();
        let params = bind_constants(&mut tape, self)?;
        let out = forward(&mut tape, &self.config, &params, batch)?;
        Ok((tape.value(out.logits).clone(), out.routing))
    }

    /// `log p(tokens[i+1] | tokens[..=i])` for every position of one sequence.
    pub fn next_token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let logits = self.forward_logits(&[tokens.to_vec()])?;
        let v = self.config.vocab_size;
        Ok((0..tokens.len() - 1)
            .map(|i| log_softmax_at(&logits.data()[i * v..(i + 1) * v], tokens[i + 1] as usize))
            .collect())
    }
}

/// `log softmax(row)[index]` evaluated in f64.
pub fn log_softmax_at<T: Element>(row: &[T], index: usize) -> f64 {
    let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|v| (v.to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln();
    row[index].to_f64_lossy() - lse
}
