//! Greedy and beam-search generation, and candidate scoring by mean token
//! negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{with_eos, MultimodalExample, System};
use crate::tensor::{Scope, Tape, Tensor};
use crate::text::EOS;
use crate::tokenization::{Sampling, TokenizationPath};

pub const DEFAULT_MAX_LEN: usize = 32;
pub const DEFAULT_BEAM_WIDTH: usize = 5;

/// Anything that yields next-token log-probabilities for a history.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, history: &[usize]) -> Result<Vec<f64>>;
}

/// A [`System`] bound to one encoded input.
pub struct EncodedScorer<'a> {
    pub system: &'a System,
    pub z: Tensor,
}

impl<'a> EncodedScorer<'a> {
    pub fn new(system: &'a System, example: &MultimodalExample, path: TokenizationPath) -> Result<Self> {
        let (z, _) = system.encode_for_inference(example, path)?;
        Ok(EncodedScorer { system, z })
    }
}

impl StepScorer for EncodedScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.system.model.vocab_size
    }

    fn log_probs(&self, history: &[usize]) -> Result<Vec<f64>> {
        self.system.step_log_probs(&self.z, history)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Comparison score: accumulated log-probability, divided by length when
    /// normalizing.
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding; stops after EOS or `max_len` tokens.
pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize) -> Result<BeamHypothesis> {
    if max_len < 1 {
        return Err(Error::Argument("max_len must be ≥ 1".into()));
    }
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = scorer.log_probs(&hyp.tokens)?;
        let t = argmax(&lp);
        hyp.tokens.push(t);
        hyp.log_prob += lp[t];
        if t == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search keeping the `width` best partial hypotheses per step by
/// accumulated log-probability. Hypotheses ending in EOS retire to a pool;
/// those still open at `max_len` join it too. The best pool entry under the
/// length-normalization rule is returned; ties go to the earlier entry.
pub fn beam_search(
    scorer: &impl StepScorer,
    width: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<BeamHypothesis> {
    if width < 1 {
        return Err(Error::Argument("beam width must be ≥ 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Argument("max_len must be ≥ 1".into()));
    }
    let mut beam = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(beam.len());
        for (b, hyp) in beam.iter().enumerate() {
            let lp = scorer.log_probs(&hyp.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                expansions.push((hyp.log_prob + l, b, t));
            }
            dists.push(lp);
        }
        // Stable: equal scores keep beam order, then token order.
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(width);
        for &(lp, b, t) in expansions.iter().take(width) {
            let mut tokens = beam[b].tokens.clone();
            tokens.push(t);
            let hyp = BeamHypothesis {
                tokens,
                log_prob: lp,
                finished: t == EOS,
            };
            if hyp.finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        if next.is_empty() {
            break;
        }
        beam = next;
    }
    if !beam.iter().all(|h| h.finished) {
        pool.extend(beam.into_iter().filter(|h| !h.finished && h.tokens.len() == max_len));
    }
    let mut best: Option<BeamHypothesis> = None;
    for hyp in pool {
        let better = match &best {
            None => true,
            Some(b) => hyp.score(length_norm) > b.score(length_norm),
        };
        if better {
            best = Some(hyp);
        }
    }
    best.ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
}

/// Sum of log-probabilities of a complete token sequence.
pub fn sequence_log_prob(scorer: &impl StepScorer, tokens: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        total += scorer.log_probs(&tokens[..i])?[tokens[i]];
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    /// Mean token negative log-likelihood of the candidate followed by EOS.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePlacement {
    /// The candidate set is part of the encoder input.
    InInput,
    /// The candidate block is left out, so selection depends only on content.
    HeldOut,
}

/// Teacher-forced mean NLL of every candidate; returns the argmin (lowest
/// index on ties) and all scores.
pub fn score_candidates(
    system: &System,
    example: &MultimodalExample,
    candidates: &[Vec<usize>],
    path: TokenizationPath,
    placement: CandidatePlacement,
) -> Result<(usize, Vec<CandidateScore>)> {
    if candidates.len() < 2 {
        return Err(Error::Argument("at least 2 candidates required".into()));
    }
    let input = MultimodalExample {
        candidates: match placement {
            CandidatePlacement::InInput => candidates.to_vec(),
            CandidatePlacement::HeldOut => Vec::new(),
        },
        ..example.clone()
    };
    let tape = Tape::no_grad();
    let scope = Scope::new(&tape, &system.store);
    let enc = system.encode(&scope, &input, path, Sampling::Deterministic)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for (index, cand) in candidates.iter().enumerate() {
        let loss = system.target_loss(&scope, enc.z, &with_eos(cand))?.item();
        scores.push(CandidateScore { index, loss });
    }
    let mut best = 0;
    for s in &scores {
        if s.loss < scores[best].loss {
            best = s.index;
        }
    }
    Ok((best, scores))
}
