//! Exact match, BLEU and ROUGE-L over whitespace tokens.

use std::collections::HashMap;

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate total for order `n`.
pub fn clipped_counts<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let refs = ngrams(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn combine(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let n = matched.len();
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln() / n as f64;
    }
    brevity_penalty(cand_len, ref_len) * log_sum.exp()
}

/// Single-reference BLEU-n without smoothing: any zero precision gives 0.
pub fn bleu_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must lie in 1..=4");
    if candidate.is_empty() {
        return 0.0;
    }
    let (m, t): (Vec<_>, Vec<_>) = (1..=n).map(|k| clipped_counts(candidate, reference, k)).unzip();
    combine(&m, &t, candidate.len(), reference.len())
}

/// Corpus BLEU-n: clipped counts and lengths summed over all pairs first.
pub fn corpus_bleu<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must lie in 1..=4");
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in pairs {
        c_len += c.len();
        r_len += r.len();
        for k in 1..=n {
            let (m, t) = clipped_counts(c, r, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    combine(&matched, &totals, c_len, r_len)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure `(1+β²)PR / (R + β²P)` on the longest common subsequence.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    let c: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

pub fn exact_match(candidate: &str, reference: &str) -> bool {
    candidate.split_whitespace().eq(reference.split_whitespace())
}
