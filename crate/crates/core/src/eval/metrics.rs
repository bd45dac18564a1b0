use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

/// Additive floor for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matched (clipped) n-grams and candidate/reference n-gram totals.
fn overlap<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, c.values().sum(), r.values().sum())
}

fn check_counts(candidates: usize, references: usize) -> Result<(), EvalError> {
    if candidates != references {
        return Err(EvalError::CountMismatch {
            candidates,
            references,
        });
    }
    if candidates == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus BLEU over whitespace tokens.
///
/// Orders for which the candidates contain no n-grams at all are left out of
/// the geometric mean; orders with zero matches use `ε / total`.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64, EvalError> {
    check_counts(candidates.len(), references.len())?;
    let mut matched = [0usize; BLEU_MAX_ORDER];
    let mut total = [0usize; BLEU_MAX_ORDER];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        let c: Vec<&str> = c.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        if r.is_empty() {
            return Err(EvalError::EmptyReference(i));
        }
        c_len += c.len();
        r_len += r.len();
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t, _) = overlap(&c, &r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..BLEU_MAX_ORDER {
        if total[n] == 0 {
            continue;
        }
        let m = if matched[n] == 0 { BLEU_EPSILON } else { matched[n] as f64 };
        log_sum += (m / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Sentence chrF in `[0, 100]`: character n-grams of orders 1..=6 with
/// whitespace removed, `F_β` per order, averaged over orders where either
/// side has n-grams. Two empty strings score 100.
pub fn chrf_sentence(candidate: &str, reference: &str) -> f64 {
    let c: Vec<char> = candidate.chars().filter(|ch| !ch.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|ch| !ch.is_whitespace()).collect();
    let b2 = CHRF_BETA * CHRF_BETA;
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=CHRF_MAX_ORDER {
        let (m, ct, rt) = overlap(&c, &r, n);
        if ct == 0 && rt == 0 {
            continue;
        }
        orders += 1;
        if m == 0 {
            continue;
        }
        let p = m as f64 / ct as f64;
        let rec = m as f64 / rt as f64;
        sum += (1.0 + b2) * p * rec / (b2 * p + rec);
    }
    if orders == 0 {
        100.0
    } else {
        100.0 * sum / orders as f64
    }
}

/// Corpus chrF: the mean of sentence scores.
pub fn chrf<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64, EvalError> {
    check_counts(candidates.len(), references.len())?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| chrf_sentence(c.as_ref(), r.as_ref()))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(bleu(&["a b c d e"], &["a b c d e"]).unwrap(), 1.0);
        assert_eq!(bleu(&[""], &["a b"]).unwrap(), 0.0);
        assert_eq!(chrf(&["حاجة جامدة"], &["حاجة جامدة"]).unwrap(), 100.0);
        assert_eq!(chrf(&["aaaa"], &["bbbb"]).unwrap(), 0.0);
    }

    #[test]
    fn short_candidate_uses_available_orders() {
        // Orders 1-3 match exactly; brevity penalty exp(1 - 4/3).
        let b = bleu(&["the cat sat"], &["the cat sat down"]).unwrap();
        assert!((b - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu(&["a"], &["a", "b"]), Err(EvalError::CountMismatch { .. })));
        assert!(matches!(bleu(&["a"], &[" "]), Err(EvalError::EmptyReference(0))));
        assert!(chrf::<&str>(&[], &[]).is_err());
    }
}
