//! Gumbel perturbation and top-K selection without replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::MIN_PROB;

/// Uniform draws are kept inside `(ε, 1 − ε)` so the noise stays finite.
pub const UNIFORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GumbelMode {
    TrainSample,
    EvalDeterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub seed: u64,
    pub mode: GumbelMode,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Argument(format!(
                "Gumbel temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Categories picked for one channel, in emission order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledCategories {
    pub indices: Vec<usize>,
    /// Ranking scores: `ln p + g` when sampling, `ln p` when deterministic.
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `−ln(−ln u)`
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// `count` i.i.d. standard Gumbel values.
pub fn gumbel_noise(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| gumbel_from_uniform(rng.gen::<f64>()))
        .collect()
}

pub(crate) fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Argument("empty distribution".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(format!("invalid probability vector {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Picks the `k` largest of `ln p + noise` (or of `ln p` without noise),
/// ordered by score descending, ties to the lower index.
///
/// With i.i.d. Gumbel noise the ordered result is a draw of `k` categories
/// without replacement from `p`. Exactly-zero categories are never selected.
pub fn perturb_topk(p: &[f64], k: usize, noise: Option<&[f64]>) -> Result<SampledCategories> {
    validate_distribution(p)?;
    if k == 0 || k > p.len() {
        return Err(Error::Argument(format!(
            "K = {k} must lie in 1..={}",
            p.len()
        )));
    }
    let available = p.iter().filter(|&&v| v > 0.0).count();
    if k > available {
        return Err(Error::Selection { k, available });
    }
    if let Some(n) = noise {
        if n.len() != p.len() {
            return Err(Error::shape("perturb_topk", &[p.len()], &[n.len()]));
        }
    }
    let mut ranked: Vec<(usize, f64)> = p
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| {
            let base = v.max(MIN_PROB).ln();
            (i, noise.map_or(base, |n| base + n[i]))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(SampledCategories {
        indices: ranked.iter().map(|r| r.0).collect(),
        scores: ranked.iter().map(|r| r.1).collect(),
        probs: ranked.iter().map(|r| p[r.0]).collect(),
    })
}
