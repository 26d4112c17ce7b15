use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fan_in_uniform, uniform};
use crate::tensor::{ParamId, ParamStore, Scope, Tensor, Var};
use crate::text::PAD;

pub const LN_EPS: f64 = 1e-5;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of token and modality embeddings (D).
    pub embed_dim: usize,
    /// Transformer width (d'). A projection is inserted when it differs from D.
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    #[serde(default = "yes")]
    pub positional: bool,
    /// Reuse the token embedding table as the output projection.
    #[serde(default)]
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            model_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 128,
            positional: true,
            tie_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.tie_output && self.embed_dim != self.model_dim {
            return Err(Error::Config(
                "tie_output needs embed_dim == model_dim".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), fan_in_uniform(rng, fan_in, fan_out))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn apply<'t>(&self, scope: &Scope<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(scope.p(self.w))?.add_row(scope.p(self.b))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::new(vec![dim], vec![1.0; dim])?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    fn apply<'t>(&self, scope: &Scope<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(scope.p(self.gain), scope.p(self.bias), LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    fn apply<'t>(
        &self,
        scope: &Scope<'t>,
        x: Var<'t>,
        memory: Var<'t>,
        heads: usize,
        causal: bool,
    ) -> Result<Var<'t>> {
        let q = self.q.apply(scope, x)?;
        let k = self.k.apply(scope, memory)?;
        let v = self.v.apply(scope, memory)?;
        let a = q.attention(k, v, heads, causal)?;
        self.o.apply(scope, a)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn apply<'t>(&self, scope: &Scope<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.apply(scope, x)?.relu();
        self.down.apply(scope, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

/// Pre-norm transformer encoder-decoder with sinusoidal positions.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub token_embedding: ParamId,
    input_proj: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Option<Linear>,
}

/// Sinusoidal position table row `pos`.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl EncoderDecoder {
    pub fn new(
        config: ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, m, f) = (config.embed_dim, config.model_dim, config.ff_dim);
        // An embedding lookup has fan-in 1, hence ±1.
        let token_embedding = store.add("text.embedding", uniform(rng, &[vocab_size, d], 1.0))?;
        let input_proj = if d != m {
            Some(Linear::new(store, "text.input_proj", d, m, rng)?)
        } else {
            None
        };
        let ff = |store: &mut ParamStore, name: &str, rng: &mut _| -> Result<FeedForward> {
            Ok(FeedForward {
                up: Linear::new(store, &format!("{name}.up"), m, f, rng)?,
                down: Linear::new(store, &format!("{name}.down"), f, m, rng)?,
            })
        };
        let mut encoder = Vec::new();
        for i in 0..config.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                ln_attn: Norm::new(store, &format!("{p}.ln_attn"), m)?,
                attn: Attention::new(store, &format!("{p}.attn"), m, rng)?,
                ln_ff: Norm::new(store, &format!("{p}.ln_ff"), m)?,
                ff: ff(store, &format!("{p}.ff"), rng)?,
            });
        }
        let encoder_norm = Norm::new(store, "encoder.ln", m)?;
        let mut decoder = Vec::new();
        for i in 0..config.decoder_layers {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                ln_self: Norm::new(store, &format!("{p}.ln_self"), m)?,
                self_attn: Attention::new(store, &format!("{p}.self_attn"), m, rng)?,
                ln_cross: Norm::new(store, &format!("{p}.ln_cross"), m)?,
                cross_attn: Attention::new(store, &format!("{p}.cross_attn"), m, rng)?,
                ln_ff: Norm::new(store, &format!("{p}.ln_ff"), m)?,
                ff: ff(store, &format!("{p}.ff"), rng)?,
            });
        }
        let decoder_norm = Norm::new(store, "decoder.ln", m)?;
        let output = if config.tie_output {
            None
        } else {
            Some(Linear::new(store, "decoder.output", m, vocab_size, rng)?)
        };
        Ok(EncoderDecoder {
            config,
            vocab_size,
            token_embedding,
            input_proj,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
        })
    }

    pub fn output_projection(&self) -> Option<(ParamId, ParamId)> {
        self.output.as_ref().map(|l| (l.w, l.b))
    }

    /// Token embeddings `[n × D]`.
    pub fn embed_tokens<'t>(&self, scope: &Scope<'t>, ids: &[usize]) -> Result<Var<'t>> {
        scope.p(self.token_embedding).gather_rows(ids)
    }

    fn to_model_space<'t>(&self, scope: &Scope<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let x = match &self.input_proj {
            Some(p) => p.apply(scope, x)?,
            None => x,
        };
        if !self.config.positional {
            return Ok(x);
        }
        let shape = x.shape();
        let (len, dim) = (shape[0], shape[1]);
        let mut table = Vec::with_capacity(len * dim);
        for pos in 0..len {
            table.extend(position_encoding(pos, dim));
        }
        x.add(scope.constant(Tensor::new(vec![len, dim], table)?))
    }

    /// Encoder over an assembled `[L × D]` input; returns `z: [L × d']`.
    pub fn encode<'t>(&self, scope: &Scope<'t>, input: Var<'t>) -> Result<Var<'t>> {
        let shape = input.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.embed_dim {
            return Err(Error::shape("encode", &shape, &[0, self.config.embed_dim]));
        }
        let heads = self.config.heads;
        let mut x = self.to_model_space(scope, input)?;
        for layer in &self.encoder {
            let h = layer.ln_attn.apply(scope, x)?;
            x = x.add(layer.attn.apply(scope, h, h, heads, false)?)?;
            let h = layer.ln_ff.apply(scope, x)?;
            x = x.add(layer.ff.apply(scope, h)?)?;
        }
        self.encoder_norm.apply(scope, x)
    }

    /// Decoder logits `[n × T']` for the input tokens `[pad, history...]`;
    /// row `i` predicts the token after `history[..i]`.
    pub fn decode<'t>(&self, scope: &Scope<'t>, z: Var<'t>, history: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = history.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Argument(format!(
                "history token {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mut ids = Vec::with_capacity(history.len() + 1);
        ids.push(PAD);
        ids.extend_from_slice(history);
        let heads = self.config.heads;
        let mut y = self.to_model_space(scope, self.embed_tokens(scope, &ids)?)?;
        for layer in &self.decoder {
            let h = layer.ln_self.apply(scope, y)?;
            y = y.add(layer.self_attn.apply(scope, h, h, heads, true)?)?;
            let h = layer.ln_cross.apply(scope, y)?;
            y = y.add(layer.cross_attn.apply(scope, h, z, heads, false)?)?;
            let h = layer.ln_ff.apply(scope, y)?;
            y = y.add(layer.ff.apply(scope, h)?)?;
        }
        let h = self.decoder_norm.apply(scope, y)?;
        match &self.output {
            Some(out) => out.apply(scope, h),
            None => h.matmul_t(scope.p(self.token_embedding)),
        }
    }

    /// Teacher forcing: logits for every gold position, conditioned on the
    /// gold prefix only.
    pub fn forward_teacher_forced<'t>(
        &self,
        scope: &Scope<'t>,
        z: Var<'t>,
        gold: &[usize],
    ) -> Result<Var<'t>> {
        let Some((_, prefix)) = gold.split_last() else {
            return Err(Error::Argument("empty gold sequence".into()));
        };
        self.decode(scope, z, prefix)
    }
}
