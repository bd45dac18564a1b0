use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::Script;
use crate::moe::{RoutingTrace, TraceEntry};

/// Top-1 routing counts per script.
///
/// A token whose highest router probability is shared by several experts
/// credits each of them equally, so a uniform router yields exactly `1/N`
/// per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub n_experts: usize,
    pub counts: BTreeMap<Script, Vec<f64>>,
}

/// Experts tied for the top score of an entry.
fn top_experts(e: &TraceEntry) -> Vec<usize> {
    if !e.probs.is_empty() {
        let max = e.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return (0..e.probs.len()).filter(|&i| e.probs[i] == max).collect();
    }
    let max = e.gates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    e.experts
        .iter()
        .zip(&e.gates)
        .filter(|(_, g)| **g == max)
        .map(|(x, _)| *x)
        .collect()
}

/// Pool the labeled entries of one or more traces (e.g. every layer).
pub fn routing_stats(traces: &[RoutingTrace]) -> Result<RoutingStats, EvalError> {
    let n = traces.first().map_or(0, |t| t.n_experts);
    if traces.iter().any(|t| t.n_experts != n) {
        return Err(EvalError::Routing("traces disagree on the expert count".into()));
    }
    let mut counts: BTreeMap<Script, Vec<f64>> = BTreeMap::new();
    for entry in traces.iter().flat_map(|t| &t.entries) {
        let Some(script) = entry.script else { continue };
        let top = top_experts(entry);
        let row = counts.entry(script).or_insert_with(|| vec![0.0; n]);
        for e in &top {
            let slot = row
                .get_mut(*e)
                .ok_or_else(|| EvalError::Routing(format!("expert {e} out of range for {n} experts")))?;
            *slot += 1.0 / top.len() as f64;
        }
    }
    if counts.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    Ok(RoutingStats { n_experts: n, counts })
}

impl RoutingStats {
    /// `P(expert | script)` rows.
    pub fn probabilities(&self) -> BTreeMap<Script, Vec<f64>> {
        self.counts
            .iter()
            .map(|(s, row)| {
                let total: f64 = row.iter().sum();
                (*s, row.iter().map(|c| c / total).collect())
            })
            .collect()
    }

    /// Keep only the given scripts.
    pub fn restrict(&self, scripts: &[Script]) -> Self {
        Self {
            n_experts: self.n_experts,
            counts: self
                .counts
                .iter()
                .filter(|(s, _)| scripts.contains(s))
                .map(|(s, r)| (*s, r.clone()))
                .collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("script");
        for e in 0..self.n_experts {
            let _ = write!(out, "\texpert{e}");
        }
        out.push_str("\ttokens\n");
        for (s, row) in self.probabilities() {
            let _ = write!(out, "{s}");
            for p in row {
                let _ = write!(out, "\t{p:.4}");
            }
            let _ = writeln!(out, "\t{}", self.counts[&s].iter().sum::<f64>());
        }
        out
    }
}

/// Mean over scripts of `max_e P(e | s)`.
pub fn specialization_score(stats: &RoutingStats) -> Result<f64, EvalError> {
    let probs = stats.probabilities();
    if probs.len() < 2 {
        return Err(EvalError::Routing(format!("need at least 2 scripts, got {}", probs.len())));
    }
    let sum: f64 = probs
        .values()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum();
    Ok(sum / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(pos: usize, script: Script, experts: &[usize], probs: &[f64]) -> TraceEntry {
        TraceEntry {
            position: pos,
            script: Some(script),
            experts: experts.to_vec(),
            gates: vec![1.0 / experts.len() as f64; experts.len()],
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn perfect_specialization() {
        let t = RoutingTrace {
            layer: 0,
            n_experts: 2,
            entries: vec![
                entry(0, Script::Arabic, &[0], &[0.9, 0.1]),
                entry(1, Script::Latin, &[1], &[0.2, 0.8]),
            ],
        };
        let s = routing_stats(&[t]).unwrap();
        assert_eq!(s.probabilities()[&Script::Arabic], vec![1.0, 0.0]);
        assert_eq!(specialization_score(&s).unwrap(), 1.0);
    }

    #[test]
    fn uniform_router_is_exactly_one_over_n() {
        let t = RoutingTrace {
            layer: 0,
            n_experts: 3,
            entries: (0..4)
                .map(|i| entry(i, if i % 2 == 0 { Script::Arabic } else { Script::Latin }, &[0, 1], &[1.0 / 3.0; 3]))
                .collect(),
        };
        let s = routing_stats(&[t]).unwrap();
        for row in s.probabilities().values() {
            assert!(row.iter().all(|p| (*p - 1.0 / 3.0).abs() < 1e-15));
        }
        assert!((specialization_score(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mixed_case() {
        let mut counts = BTreeMap::new();
        counts.insert(Script::Arabic, vec![8.0, 2.0]);
        counts.insert(Script::Latin, vec![3.0, 7.0]);
        let s = RoutingStats { n_experts: 2, counts };
        assert!((specialization_score(&s).unwrap() - 0.75).abs() < 1e-12);
        assert!(specialization_score(&s.restrict(&[Script::Arabic])).is_err());
    }

    #[test]
    fn unlabeled_trace_is_empty() {
        let mut e = entry(0, Script::Arabic, &[0], &[]);
        e.script = None;
        let t = RoutingTrace { layer: 0, n_experts: 2, entries: vec![e] };
        assert!(matches!(routing_stats(&[t]), Err(EvalError::EmptyTrace)));
    }
}
