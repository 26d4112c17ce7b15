use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fan_in_uniform;
use crate::tensor::{kernels, ParamId, ParamStore, Scope, Tensor, Var};
use crate::text::TextTokenizer;

fn default_temperature() -> f64 {
    1.0
}

/// Per-modality settings as they appear in the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub name: String,
    pub num_categories: usize,
    /// Categories emitted per example.
    pub k: usize,
    /// Tokens per category name after padding.
    pub name_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Filled from the world when empty.
    #[serde(default)]
    pub category_names: Vec<String>,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 1 {
            return Err(Error::Config(format!("channel `{}` has no categories", self.name)));
        }
        if self.k < 1 || self.k > self.num_categories {
            return Err(Error::Config(format!(
                "channel `{}`: K = {} must lie in 1..={}",
                self.name, self.k, self.num_categories
            )));
        }
        if self.name_len < 1 {
            return Err(Error::Config(format!("channel `{}`: name_len must be ≥ 1", self.name)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "channel `{}`: temperature must be positive",
                self.name
            )));
        }
        if !self.category_names.is_empty() && self.category_names.len() != self.num_categories {
            return Err(Error::Config(format!(
                "channel `{}`: {} names for {} categories",
                self.name,
                self.category_names.len(),
                self.num_categories
            )));
        }
        Ok(())
    }

    /// Number of embedding vectors the channel contributes to the encoder input.
    pub fn sequence_len(&self) -> usize {
        self.k * self.name_len
    }
}

/// One modality: classifier, category-name tokens and embedding parameters.
#[derive(Clone, Debug)]
pub struct ModalityChannel {
    pub config: ChannelConfig,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// `num_categories × name_len` token ids, tail-padded with the pad token.
    pub name_tokens: Vec<Vec<usize>>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    /// `num_categories × (name_len · embed_dim)`: row `c` holds the
    /// `name_len` embedding vectors of category `c`.
    pub embedding: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl ModalityChannel {
    /// Registers the channel's parameters. Category-name embeddings start as
    /// copies of the text embedding rows of each name token.
    pub fn new(
        config: ChannelConfig,
        feature_dim: usize,
        tokenizer: &TextTokenizer,
        token_embedding: &Tensor,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.category_names.len() != config.num_categories {
            return Err(Error::Config(format!(
                "channel `{}` needs {} category names",
                config.name, config.num_categories
            )));
        }
        let embed_dim = token_embedding.cols();
        let name_tokens = config
            .category_names
            .iter()
            .map(|n| {
                let ids = tokenizer.tokenize(n)?;
                if ids.len() > config.name_len {
                    return Err(Error::Config(format!(
                        "category name `{n}` has {} tokens, name_len is {}",
                        ids.len(),
                        config.name_len
                    )));
                }
                tokenizer.tokenize_padded(n, config.name_len)
            })
            .collect::<Result<Vec<_>>>()?;

        let (c, t, d) = (config.num_categories, config.name_len, embed_dim);
        let mut table = Vec::with_capacity(c * t * d);
        for ids in &name_tokens {
            for &id in ids {
                table.extend_from_slice(token_embedding.row(id));
            }
        }
        let prefix = format!("channel.{}", config.name);
        let classifier_w =
            store.add(format!("{prefix}.classifier.w"), fan_in_uniform(rng, feature_dim, c))?;
        let classifier_b = store.add(format!("{prefix}.classifier.b"), Tensor::zeros(&[c]))?;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            Tensor::new(vec![c, t * d], table)?,
        )?;
        let out = config.k * t * d;
        let fc_w = store.add(format!("{prefix}.fc.w"), fan_in_uniform(rng, c, out))?;
        let fc_b = store.add(format!("{prefix}.fc.b"), Tensor::zeros(&[out]))?;
        let ln_gain = store.add(
            format!("{prefix}.fc.ln.gain"),
            Tensor::new(vec![d], vec![1.0; d])?,
        )?;
        let ln_bias = store.add(format!("{prefix}.fc.ln.bias"), Tensor::zeros(&[d]))?;
        Ok(ModalityChannel {
            config,
            feature_dim,
            embed_dim,
            name_tokens,
            classifier_w,
            classifier_b,
            embedding,
            fc_w,
            fc_b,
            ln_gain,
            ln_bias,
        })
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn num_categories(&self) -> usize {
        self.config.num_categories
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn name_len(&self) -> usize {
        self.config.name_len
    }

    pub fn param_prefix(&self) -> String {
        format!("channel.{}", self.config.name)
    }

    pub fn classifier_prefix(&self) -> String {
        format!("channel.{}.classifier", self.config.name)
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::shape(
                "channel features",
                &[self.feature_dim],
                &[features.len()],
            ));
        }
        Ok(())
    }

    /// Classifier distribution `p(·|x)` as a `[1×C]` tape value.
    pub fn probabilities<'t>(&self, scope: &Scope<'t>, features: &[f64]) -> Result<Var<'t>> {
        self.check_features(features)?;
        let x = scope.constant(Tensor::new(vec![1, self.feature_dim], features.to_vec())?);
        x.matmul(scope.p(self.classifier_w))?
            .add_row(scope.p(self.classifier_b))?
            .softmax(1.0)
    }

    /// Classifier distribution computed outside any tape.
    pub fn classify(&self, store: &ParamStore, features: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let c = self.num_categories();
        // Same accumulation order as `probabilities`: product first, then bias.
        let mut logits = vec![0.0; c];
        kernels::gemm_nn(
            features,
            store.get(self.classifier_w).value(),
            &mut logits,
            1,
            self.feature_dim,
            c,
        );
        for (l, b) in logits.iter_mut().zip(store.get(self.classifier_b).value()) {
            *l += b;
        }
        let mut p = vec![0.0; c];
        kernels::softmax_row(&logits, 1.0, &mut p);
        Ok(p)
    }
}
