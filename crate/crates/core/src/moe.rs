//! Top-k routed mixture of gated feed-forward experts.
//!
//! Only the selected experts run on a token. Gates are the softmax of the
//! selected router logits; the load-balancing loss is `N · Σ_i f_i · P_i`
//! with `f_i` the top-1 dispatch fraction and `P_i` the mean router probability.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::Script;
use crate::model::{gated_ffn, MoeConfig};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("top_k {k} exceeds {n} experts")]
    TopKTooLarge { k: usize, n: usize },
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("router logits must be [tokens, experts], got {0:?}")]
    BadLogits(Vec<usize>),
    #[error("expected {expected} experts, got {found}")]
    ExpertCount { expected: usize, found: usize },
    #[error("routing trace is empty")]
    EmptyTrace,
    #[error("trace entry at position {0} has no router probabilities")]
    MissingProbabilities(usize),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-token expert choice: ids in descending logit order (ties broken by
/// lower index) and their normalized gates.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub experts: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
}

/// Select `k` experts per row of `[tokens, n_experts]` router logits.
pub fn route_topk<T: Element>(logits: &Tensor<T>, k: usize) -> Result<Routing, MoeError> {
    let &[tokens, n] = logits.shape() else {
        return Err(MoeError::BadLogits(logits.shape().to_vec()));
    };
    if k == 0 {
        return Err(MoeError::ZeroTopK);
    }
    if k > n {
        return Err(MoeError::TopKTooLarge { k, n });
    }
    let mut experts = Vec::with_capacity(tokens);
    let mut gates = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let row: Vec<f64> = logits.row(t).iter().map(|v| v.to_f64_lossy()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        gates.push(softmax(&order.iter().map(|&e| row[e]).collect::<Vec<_>>()));
        experts.push(order);
    }
    Ok(Routing { experts, gates })
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Tape handles of one gated feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub up: Var,
    pub gate: Var,
    pub down: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub position: usize,
    pub script: Option<Script>,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
    /// Full router distribution; empty when read back from a text export.
    pub probs: Vec<f64>,
}

impl TraceEntry {
    pub fn top1(&self) -> usize {
        self.experts[0]
    }
}

/// Routing decisions of one MoE layer over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub layer: usize,
    pub n_experts: usize,
    pub entries: Vec<TraceEntry>,
}

impl RoutingTrace {
    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    /// Attach a script label to every position (one label per token).
    pub fn label(&mut self, scripts: &[Script]) {
        for e in &mut self.entries {
            e.script = scripts.get(e.position).copied();
        }
    }

    /// Tab-separated lines `position  script  expert:gate …`; unlabeled
    /// positions print `-`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# layer {} experts {}", self.layer, self.n_experts);
        for e in &self.entries {
            let label = e.script.map_or("-", Script::as_str);
            let _ = write!(out, "{}\t{}", e.position, label);
            for (id, g) in e.experts.iter().zip(&e.gates) {
                let _ = write!(out, "\t{id}:{g}");
            }
            out.push('\n');
        }
        out
    }

    /// Parse one or more traces written by [`RoutingTrace::to_text`].
    pub fn parse_text(text: &str) -> Result<Vec<RoutingTrace>, MoeError> {
        let mut traces: Vec<RoutingTrace> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: &str| MoeError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# layer ") {
                let mut parts = rest.split_whitespace();
                let layer = parts.next().and_then(|v| v.parse().ok());
                let n = match (parts.next(), parts.next()) {
                    (Some("experts"), Some(n)) => n.parse().ok(),
                    _ => None,
                };
                let (Some(layer), Some(n_experts)) = (layer, n) else {
                    return Err(err("malformed layer header"));
                };
                traces.push(RoutingTrace {
                    layer,
                    n_experts,
                    entries: Vec::new(),
                });
                continue;
            }
            let trace = traces.last_mut().ok_or_else(|| err("entry before layer header"))?;
            let mut fields = line.split('\t');
            let position = fields
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err("bad position"))?;
            let script = match fields.next() {
                Some("-") => None,
                Some(s) => Some(s.parse().map_err(|m: String| err(&m))?),
                None => return Err(err("missing script label")),
            };
            let mut experts = Vec::new();
            let mut gates = Vec::new();
            for f in fields {
                let (id, g) = f.split_once(':').ok_or_else(|| err("expected expert:gate"))?;
                let id: usize = id.parse().map_err(|_| err("bad expert id"))?;
                if id >= trace.n_experts {
                    return Err(err("expert id out of range"));
                }
                experts.push(id);
                gates.push(g.parse().map_err(|_| err("bad gate"))?);
            }
            if experts.is_empty() {
                return Err(err("no experts on line"));
            }
            trace.entries.push(TraceEntry {
                position,
                script,
                experts,
                gates,
                probs: Vec::new(),
            });
        }
        Ok(traces)
    }
}

/// `N · Σ_i f_i · P_i` over the entries of a trace.
pub fn load_balance_loss(trace: &RoutingTrace, n_experts: usize) -> Result<f64, MoeError> {
    if trace.entries.is_empty() {
        return Err(MoeError::EmptyTrace);
    }
    let t = trace.entries.len() as f64;
    let mut f = vec![0.0; n_experts];
    let mut p = vec![0.0; n_experts];
    for e in &trace.entries {
        if e.probs.len() != n_experts {
            return Err(MoeError::MissingProbabilities(e.position));
        }
        f[e.top1()] += 1.0 / t;
        for (acc, &v) in p.iter_mut().zip(&e.probs) {
            *acc += v / t;
        }
    }
    Ok(n_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

pub struct MoeOutput {
    /// `[tokens, d]`
    pub y: Var,
    /// Differentiable load-balancing loss (rank 0).
    pub aux_loss: Var,
    pub trace: RoutingTrace,
}

/// Route `x: [tokens, d]` through `experts` with router weights `[d, N]`.
pub fn moe_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    experts: &[FfnVars],
    router: Var,
    config: &MoeConfig,
) -> Result<MoeOutput, MoeError> {
    let n = config.n_experts;
    let k = config.top_k;
    if experts.len() != n {
        return Err(MoeError::ExpertCount {
            expected: n,
            found: experts.len(),
        });
    }
    let tokens = tape.shape(x)[0];
    let logits = tape.matmul(x, router)?;
    let routing = route_topk(tape.value(logits), k)?;
    let probs = tape.softmax(logits, 1)?;

    // Gates: softmax over the gathered selected logits, flattened to [tokens·k, 1].
    let flat_logits = tape.reshape(logits, &[tokens * n, 1])?;
    let picks: Vec<usize> = routing
        .experts
        .iter()
        .enumerate()
        .flat_map(|(t, es)| es.iter().map(move |&e| t * n + e))
        .collect();
    let selected = tape.gather_rows(flat_logits, &picks)?;
    let selected = tape.reshape(selected, &[tokens, k])?;
    let gates = tape.softmax(selected, 1)?;
    let gates = tape.reshape(gates, &[tokens * k, 1])?;

    let mut y: Option<Var> = None;
    for (e, ffn) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (t, es) in routing.experts.iter().enumerate() {
            if let Some(s) = es.iter().position(|&id| id == e) {
                rows.push(t);
                slots.push(t * k + s);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let out = gated_ffn(tape, xe, ffn)?;
        let g = tape.gather_rows(gates, &slots)?;
        let weighted = tape.mul(out, g)?;
        let placed = tape.scatter_add_rows(weighted, &rows, tokens)?;
        y = Some(match y {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    let y = y.expect("every token selects at least one expert");

    // f: top-1 fractions (constant), P: column means of the router probabilities.
    let mut f = vec![0.0; n];
    for es in &routing.experts {
        f[es[0]] += 1.0 / tokens as f64;
    }
    let f = tape.constant(Tensor::from_f64(&[n, 1], &f)?)?;
    let mean_row = tape.constant(Tensor::full(&[1, tokens], T::from_f64_lossy(1.0 / tokens as f64)))?;
    let p = tape.matmul(mean_row, probs)?;
    let fp = tape.matmul(p, f)?;
    let aux = tape.scale(fp, n as f64)?;
    let aux_loss = tape.reshape(aux, &[])?;

    let prob_values = tape.value(probs);
    let entries = routing
        .experts
        .into_iter()
        .zip(routing.gates)
        .enumerate()
        .map(|(t, (experts, gates))| TraceEntry {
            position: t,
            script: None,
            experts,
            gates,
            probs: prob_values.row(t).iter().map(|v| v.to_f64_lossy()).collect(),
        })
        .collect();
    Ok(MoeOutput {
        y,
        aux_loss,
        trace: RoutingTrace {
            layer: 0,
            n_experts: n,
            entries,
        },
    })
}
