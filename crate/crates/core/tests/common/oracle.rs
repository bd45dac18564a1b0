//! Brute-force n-gram scoring used to cross-check the metric implementations.

use super::fixture;

/// Corpus scores of `metric_pairs.tsv` computed offline by a separate
/// counter-based implementation.
pub const FROZEN_BLEU: f64 = 0.3862647834292018;
pub const FROZEN_CHRF: f64 = 52.0784809374607;

pub fn metric_pairs() -> (Vec<String>, Vec<String>) {
    std::fs::read_to_string(fixture("metric_pairs.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (c, r) = l.split_once('\t').unwrap();
            (c.to_string(), r.to_string())
        })
        .unzip()
}

/// All `n`-grams of `items`, listed with repetition.
fn brute_ngrams<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= items.len() {
        out.push(items[i..i + n].to_vec());
        i += 1;
    }
    out
}

/// Clipped matches by repeatedly striking used reference n-grams.
fn brute_matches<T: Clone + PartialEq>(cand: &[Vec<T>], reference: &[Vec<T>]) -> usize {
    let mut pool: Vec<Option<&Vec<T>>> = reference.iter().map(Some).collect();
    let mut hits = 0;
    for g in cand {
        if let Some(slot) = pool.iter_mut().find(|s| s.is_some_and(|r| r == g)) {
            *slot = None;
            hits += 1;
        }
    }
    hits
}

pub fn oracle_bleu(cands: &[String], refs: &[String]) -> f64 {
    let mut precisions = Vec::new();
    let (mut c_len, mut r_len) = (0.0, 0.0);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.split_whitespace().count() as f64;
        r_len += r.split_whitespace().count() as f64;
    }
    for n in 1..=4 {
        let (mut hits, mut total) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let cw: Vec<&str> = c.split_whitespace().collect();
            let rw: Vec<&str> = r.split_whitespace().collect();
            let cg = brute_ngrams(&cw, n);
            hits += brute_matches(&cg, &brute_ngrams(&rw, n));
            total += cg.len();
        }
        if total > 0 {
            precisions.push(if hits == 0 { 1e-9 } else { hits as f64 } / total as f64);
        }
    }
    let geo = (precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64).exp();
    let bp = if c_len < r_len { (1.0 - r_len / c_len).exp() } else { 1.0 };
    bp * geo
}

pub fn oracle_chrf_sentence(c: &str, r: &str) -> f64 {
    let c: Vec<char> = c.chars().filter(|x| !x.is_whitespace()).collect();
    let r: Vec<char> = r.chars().filter(|x| !x.is_whitespace()).collect();
    let mut f_scores = Vec::new();
    for n in 1..=6 {
        let (cg, rg) = (brute_ngrams(&c, n), brute_ngrams(&r, n));
        if cg.is_empty() && rg.is_empty() {
            continue;
        }
        let m = brute_matches(&cg, &rg) as f64;
        if m == 0.0 {
            f_scores.push(0.0);
            continue;
        }
        let (p, rec) = (m / cg.len() as f64, m / rg.len() as f64);
        f_scores.push(5.0 * p * rec / (4.0 * p + rec));
    }
    if f_scores.is_empty() {
        return 100.0;
    }
    100.0 * f_scores.iter().sum::<f64>() / f_scores.len() as f64
}
