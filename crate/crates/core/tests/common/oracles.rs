//! Brute-force oracles for sampling and decoding.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use std::collections::BTreeMap;

use tokfuse_core::bench::metrics::DEFAULT_ROUGE_BETA;
use tokfuse_core::bench::tfidf::{stopwords, GeneratedDoc};
use tokfuse_core::decoding::{EncodedScorer, StepScorer};
use tokfuse_core::model::System;
use tokfuse_core::rng::rng_for;
use tokfuse_core::text::EOS;
use tokfuse_core::tokenization::{gumbel_noise, perturb_topk, TokenizationPath};

/// Brute-force probability of drawing `order` without replacement.
pub fn plackett_luce(p: &[f64], order: &[usize]) -> f64 {
    let mut used = 0.0;
    let mut prob = 1.0;
    for &i in order {
        prob *= p[i] / (1.0 - used);
        used += p[i];
    }
    prob
}

pub fn ordered_tuples(c: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for prefix in ordered_tuples(c, k - 1) {
        for i in 0..c {
            if !prefix.contains(&i) {
                let mut t = prefix.clone();
                t.push(i);
                out.push(t);
            }
        }
    }
    out
}

pub fn empirical(p: &[f64], k: usize, draws: usize, seed: u64) -> HashMap<Vec<usize>, f64> {
    let mut rng = rng_for(seed, &[]);
    let mut counts: HashMap<Vec<usize>, f64> = HashMap::new();
    for _ in 0..draws {
        let g = gumbel_noise(p.len(), &mut rng);
        let s = perturb_topk(p, k, Some(&g)).unwrap();
        *counts.entry(s.indices).or_default() += 1.0;
    }
    for v in counts.values_mut() {
        *v /= draws as f64;
    }
    counts
}

/// Random autoregressive table over a small vocabulary, memoized per history.
pub struct RandomTree {
    vocab: usize,
    seed: u64,
    cache: RefCell<HashMap<Vec<usize>, Vec<f64>>>,
}

impl RandomTree {
    pub fn new(vocab: usize, seed: u64) -> Self {
        RandomTree {
            vocab,
            seed,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl StepScorer for RandomTree {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, history: &[usize]) -> tokfuse_core::Result<Vec<f64>> {
        let mut cache = self.cache.borrow_mut();
        let v = cache.entry(history.to_vec()).or_insert_with(|| {
            let path: Vec<u64> = history.iter().map(|&t| t as u64 + 1).collect();
            let mut rng = rng_for(self.seed, &path);
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            logits.iter().map(|l| l - lse).collect()
        });
        Ok(v.clone())
    }
}

/// Caches a system scorer so exhaustive search does not recompute prefixes.
pub struct Cached<'a>(pub EncodedScorer<'a>, pub RefCell<HashMap<Vec<usize>, Vec<f64>>>);

impl StepScorer for Cached<'_> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn log_probs(&self, history: &[usize]) -> tokfuse_core::Result<Vec<f64>> {
        if let Some(v) = self.1.borrow().get(history) {
            return Ok(v.clone());
        }
        let v = self.0.log_probs(history)?;
        self.1.borrow_mut().insert(history.to_vec(), v.clone());
        Ok(v)
    }
}

pub fn score(tokens: &[usize], log_prob: f64, length_norm: bool) -> f64 {
    if length_norm {
        log_prob / tokens.len() as f64
    } else {
        log_prob
    }
}

/// Best complete sequence (EOS-terminated or `max_len` long) by enumeration.
pub fn exhaustive(scorer: &impl StepScorer, max_len: usize, length_norm: bool) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let dist = scorer.log_probs(&prefix).unwrap();
        for (t, &l) in dist.iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(t);
            let total = lp + l;
            if t == EOS || seq.len() == max_len {
                let s = score(&seq, total, length_norm);
                if best.as_ref().map_or(true, |(_, b)| s > *b) {
                    best = Some((seq, s));
                }
            } else {
                stack.push((seq, total));
            }
        }
    }
    best.unwrap()
}

pub fn random_system(seed: u64) -> System {
    super::tiny_system(seed, super::tiny_model(), None)
}

pub fn scorer_for(system: &System, seed: u64) -> Cached<'_> {
    let ex = super::example(system, seed, "red ball", true);
    Cached(
        EncodedScorer::new(system, &ex, TokenizationPath::Differentiable).unwrap(),
        RefCell::new(HashMap::new()),
    )
}

/// `(candidate, reference, n, BLEU-n)` worked by hand.
pub fn bleu_cases() -> Vec<(&'static str, &'static str, usize, f64)> {
    let c = "the cat sat on mat";
    let r = "the cat sat on the mat";
    // Candidate shorter than reference: BP = exp(1 - 6/5); p1..p4 = 1, 3/4, 2/3, 1/2.
    let bp = (1.0f64 - 6.0 / 5.0).exp();
    vec![
        ("the cat sat", "the cat sat", 1, 1.0),
        ("the cat sat", "the cat sat", 3, 1.0),
        // No 4-grams in a three-token candidate.
        ("the cat sat", "the cat sat", 4, 0.0),
        // "the" is clipped to its single reference count.
        ("the the the", "the cat", 1, 1.0 / 3.0),
        ("dog runs", "cat sits", 1, 0.0),
        ("", "a b", 1, 0.0),
        (c, r, 1, bp),
        (c, r, 2, bp * 0.75f64.sqrt()),
        (c, r, 3, bp * (0.75f64 * 2.0 / 3.0).powf(1.0 / 3.0)),
        (c, r, 4, bp * (0.75f64 * 2.0 / 3.0 * 0.5).powf(0.25)),
        // Longer candidate, BP = 1: p1 = 2/4 after clipping, p2 = 1/3.
        ("a b a b", "a b c", 2, (0.5f64 / 3.0).sqrt()),
    ]
}

/// `(candidate, reference, beta, ROUGE-L)` worked by hand.
pub fn rouge_cases() -> Vec<(&'static str, &'static str, f64, f64)> {
    let beta = DEFAULT_ROUGE_BETA;
    let b2 = beta * beta;
    let f = |p: f64, r: f64| (1.0 + b2) * p * r / (r + b2 * p);
    vec![
        ("a b c", "a b c", beta, 1.0),
        // LCS 2: P = 1, R = 2/3.
        ("a c", "a b c", beta, f(1.0, 2.0 / 3.0)),
        ("a c", "a b c", 1.0, 0.8),
        ("", "a b", beta, 0.0),
        // Reversal keeps LCS 1: P = R = 1/4.
        ("a b c d", "d c b a", beta, 0.25),
        // LCS 2: P = 1/2, R = 1.
        ("x a y b", "a b", beta, f(0.5, 1.0)),
        ("p q", "r s", beta, 0.0),
    ]
}

/// Five generated texts with their sampled categories, and the categories to rank.
pub fn tfidf_toy() -> (Vec<GeneratedDoc>, Vec<(String, usize)>) {
    let doc = |text: &str, transcript: &str, sampled: &[(&str, usize)]| GeneratedDoc {
        text: text.into(),
        transcript: transcript.into(),
        sampled: sampled.iter().map(|(c, i)| (c.to_string(), *i)).collect(),
    };
    let docs = vec![
        doc("the man plays a guitar on stage", "", &[("video", 0), ("audio", 1)]),
        doc("a dog barks at the guitar", "dog", &[("video", 1), ("audio", 1)]),
        doc("someone plays guitar loudly", "", &[("video", 0)]),
        doc("rain falls on the roof", "", &[("audio", 2), ("video", 2)]),
        doc("the dog sleeps and the rain falls", "sleeps", &[("audio", 2), ("video", 1)]),
    ];
    let cats = [("video", 0), ("video", 1), ("video", 2), ("video", 3), ("audio", 1), ("audio", 2)]
        .iter()
        .map(|(c, i)| (c.to_string(), *i))
        .collect();
    (docs, cats)
}

/// TF-IDF recomputed from its definition with plain loops.
pub fn brute_tfidf(docs: &[GeneratedDoc], key: &(String, usize), all: &[(String, usize)]) -> BTreeMap<String, f64> {
    let stop = stopwords();
    let words_of = |k: &(String, usize)| -> Vec<String> {
        let mut out = Vec::new();
        for d in docs {
            if d.sampled.contains(k) {
                let tr: Vec<&str> = d.transcript.split_whitespace().collect();
                for t in d.text.split_whitespace() {
                    if !stop.contains(t) && !tr.contains(&t) {
                        out.push(t.to_string());
                    }
                }
            }
        }
        out
    };
    let docs_words: Vec<Vec<String>> = all.iter().map(words_of).collect();
    let m = docs_words.iter().filter(|d| !d.is_empty()).count() as f64;
    let mine = words_of(key);
    let mut out = BTreeMap::new();
    for word in &mine {
        let tf = mine.iter().filter(|x| *x == word).count() as f64 / mine.len() as f64;
        let df = docs_words.iter().filter(|d| d.contains(word)).count() as f64;
        out.insert(word.clone(), tf * (m / df).ln());
    }
    out
}
