//! Turning classifier outputs into language-space token embeddings.
//!
//! Three interchangeable paths produce a `[K·T × D]` embedding block per
//! channel:
//!
//! * **differentiable**: Gumbel-perturbed top-K selection. The forward pass
//!   gathers the hard category-name embeddings; the backward pass is that of
//!   the soft surrogate `softmax((ln p + g)/τ) · W`, so gradients reach both the
//!   embedding table and the classifier.
//! * **frozen**: deterministic top-K of the classifier, hard gather, no
//!   gradient into the classifier or the selection.
//! * **feature-embed**: affine map of the whole distribution followed by
//!   layer normalization.

mod channel;
mod gumbel;

pub use channel::{ChannelConfig, ModalityChannel};
pub use gumbel::{
    gumbel_from_uniform, gumbel_noise, perturb_topk, GumbelConfig, GumbelMode,
    SampledCategories, UNIFORM_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Scope, Tensor, Var, MIN_PROB};

pub const FEATURE_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizationPath {
    Differentiable,
    Frozen,
    FeatureEmbed,
}

impl TokenizationPath {
    pub const ALL: [TokenizationPath; 3] = [
        TokenizationPath::Differentiable,
        TokenizationPath::Frozen,
        TokenizationPath::FeatureEmbed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenizationPath::Differentiable => "differentiable",
            TokenizationPath::Frozen => "frozen",
            TokenizationPath::FeatureEmbed => "feature-embed",
        }
    }

    /// Whether the loss gradient reaches classifier parameters.
    pub fn trains_classifier(self) -> bool {
        !matches!(self, TokenizationPath::Frozen)
    }
}

impl std::str::FromStr for TokenizationPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tokenization path `{s}`")))
    }
}

/// Caller-supplied noise for one channel, used to hold the selection fixed.
#[derive(Clone, Debug)]
pub struct FrozenNoise {
    pub noise: Vec<f64>,
    /// When set, replaces the stop-gradient copy of the soft surrogate with a
    /// fixed value. Finite differences of the resulting function equal the
    /// straight-through gradient.
    pub soft_reference: Option<Tensor>,
}

/// How categories are chosen in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Sampling<'a> {
    /// Top-K of `p` without noise.
    Deterministic,
    /// Fresh Gumbel noise; each channel draws from a stream derived from `seed`.
    Gumbel { seed: u64 },
    /// One entry per channel, in channel order.
    Fixed(&'a [FrozenNoise]),
}

impl Sampling<'_> {
    fn noise_for(&self, channel_index: usize, categories: usize) -> Result<Option<Vec<f64>>> {
        Ok(match self {
            Sampling::Deterministic => None,
            Sampling::Gumbel { seed } => Some(gumbel_noise(
                categories,
                &mut rng_for(*seed, &[channel_index as u64]),
            )),
            Sampling::Fixed(all) => Some(
                all.get(channel_index)
                    .ok_or_else(|| Error::Argument(format!("no fixed noise for channel {channel_index}")))?
                    .noise
                    .clone(),
            ),
        })
    }

    fn reference_for(&self, channel_index: usize) -> Option<&Tensor> {
        match self {
            Sampling::Fixed(all) => all.get(channel_index)?.soft_reference.as_ref(),
            _ => None,
        }
    }
}

pub struct ChannelOutput<'t> {
    /// `[K·T × D]`
    pub embeddings: Var<'t>,
    pub sampled: SampledCategories,
}

fn block_shape(channel: &ModalityChannel) -> [usize; 2] {
    [channel.k() * channel.name_len(), channel.embed_dim]
}

/// The soft surrogate `softmax((ln p + g)/τ) · W`, one copy per selected slot.
pub fn soft_surrogate<'t>(
    scope: &Scope<'t>,
    channel: &ModalityChannel,
    probs: Var<'t>,
    noise: &[f64],
    temperature: f64,
) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let c = channel.num_categories();
    let g = scope.constant(Tensor::new(vec![1, c], noise.to_vec())?);
    let soft = probs.ln_clamped(MIN_PROB).add(g)?.softmax(temperature)?;
    soft.matmul(scope.p(channel.embedding))?
        .reshape(&[channel.name_len(), channel.embed_dim])?
        .repeat_rows(channel.k())
}

/// Straight-through embedding of already-selected categories.
///
/// Forward: the selected rows of the embedding table, bit for bit.
/// Backward: the gradient of [`soft_surrogate`] under the same noise.
pub fn straight_through_embed<'t>(
    scope: &Scope<'t>,
    channel: &ModalityChannel,
    probs: Var<'t>,
    sampled: &SampledCategories,
    noise: &[f64],
    temperature: f64,
    soft_reference: Option<&Tensor>,
) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(&bad) = sampled.indices.iter().find(|&&i| i >= channel.num_categories()) {
        return Err(Error::Argument(format!("category {bad} out of range")));
    }
    let table = scope.p(channel.embedding);
    let hard = table
        .detach()
        .gather_rows(&sampled.indices)?
        .reshape(&block_shape(channel))?;
    if !scope.grad_enabled() && soft_reference.is_none() {
        return Ok(hard);
    }
    let soft = soft_surrogate(scope, channel, probs, noise, temperature)?;
    let offset = match soft_reference {
        Some(r) => scope.constant(r.clone()),
        None => soft.detach(),
    };
    hard.add(soft.sub(offset)?)
}

/// Frozen-classifier baseline: deterministic top-K and a hard lookup.
pub fn frozen_tokenize<'t>(
    scope: &Scope<'t>,
    channel: &ModalityChannel,
    features: &[f64],
) -> Result<ChannelOutput<'t>> {
    let p = channel.classify(scope.store, features)?;
    let sampled = perturb_topk(&p, channel.k(), None)?;
    let embeddings = scope
        .p(channel.embedding)
        .gather_rows(&sampled.indices)?
        .reshape(&block_shape(channel))?;
    Ok(ChannelOutput {
        embeddings,
        sampled,
    })
}

/// Feature-embedding baseline: `LayerNorm(p · W_fc + b)` reshaped to `[K·T × D]`.
pub fn feature_embed<'t>(
    scope: &Scope<'t>,
    channel: &ModalityChannel,
    features: &[f64],
) -> Result<ChannelOutput<'t>> {
    let p = channel.probabilities(scope, features)?;
    let sampled = perturb_topk(&p.data(), channel.k(), None)?;
    let embeddings = p
        .matmul(scope.p(channel.fc_w))?
        .add_row(scope.p(channel.fc_b))?
        .reshape(&block_shape(channel))?
        .layer_norm(
            scope.p(channel.ln_gain),
            scope.p(channel.ln_bias),
            FEATURE_LN_EPS,
        )?;
    Ok(ChannelOutput {
        embeddings,
        sampled,
    })
}

/// Embeds one channel through the chosen path.
pub fn embed_channel<'t>(
    scope: &Scope<'t>,
    channel: &ModalityChannel,
    channel_index: usize,
    features: &[f64],
    path: TokenizationPath,
    sampling: Sampling<'_>,
) -> Result<ChannelOutput<'t>> {
    match path {
        TokenizationPath::Frozen => frozen_tokenize(scope, channel, features),
        TokenizationPath::FeatureEmbed => feature_embed(scope, channel, features),
        TokenizationPath::Differentiable => {
            let probs = channel.probabilities(scope, features)?;
            let c = channel.num_categories();
            let noise = sampling.noise_for(channel_index, c)?;
            let sampled = perturb_topk(&probs.data(), channel.k(), noise.as_deref())?;
            let noise = noise.unwrap_or_else(|| vec![0.0; c]);
            let embeddings = straight_through_embed(
                scope,
                channel,
                probs,
                &sampled,
                &noise,
                channel.config.temperature,
                sampling.reference_for(channel_index),
            )?;
            Ok(ChannelOutput {
                embeddings,
                sampled,
            })
        }
    }
}
