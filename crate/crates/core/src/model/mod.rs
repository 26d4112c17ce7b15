//! Multimodal fusion: channel blocks and text segments are laid out in one
//! embedding sequence, encoded, and decoded into text.
//!
//! Input layout for task token `t`, separator `s`:
//!
//! ```text
//! [t, s, channel_1, s, channel_2, ..., text_1, s, text_2, s, ..., s, cand_1, s, cand_2, ...]
//! ```

mod transformer;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use transformer::{position_encoding, EncoderDecoder, ModelConfig, LN_EPS};

use crate::error::{Error, Result};
use crate::rng::fan_in_uniform;
use crate::tensor::{kernels, ParamId, ParamStore, Scope, Tape, Tensor, Var};
use crate::text::{Task, TextTokenizer, EOS, PAD, SEP};
use crate::tokenization::{
    embed_channel, ChannelConfig, ModalityChannel, SampledCategories, Sampling, TokenizationPath,
};

/// Token-level example as seen by the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalExample {
    pub task: Task,
    /// Raw feature vector per channel name.
    pub modalities: BTreeMap<String, Vec<f64>>,
    /// Question, dialog history, transcript: any subset, in order.
    pub texts: Vec<Vec<usize>>,
    /// Candidate answers placed at the end of the encoder input.
    pub candidates: Vec<Vec<usize>>,
    /// Target ids ending with EOS, optionally followed by pad.
    pub gold: Vec<usize>,
}

impl MultimodalExample {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() && self.texts.is_empty() && self.candidates.is_empty() {
            return Err(Error::Argument("example has no input segment or modality".into()));
        }
        let real: Vec<usize> = trim_pad(&self.gold).to_vec();
        if real.last() != Some(&EOS) {
            return Err(Error::Argument("gold target must end with EOS".into()));
        }
        Ok(())
    }

    /// Same example with the gold sequence replaced.
    pub fn with_gold(&self, gold: Vec<usize>) -> Self {
        MultimodalExample {
            gold,
            ..self.clone()
        }
    }
}

fn trim_pad(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &ids[..end]
}

/// Appends EOS to a token sequence.
pub fn with_eos(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.push(EOS);
    v
}

/// Assembled input length for the given channel block sizes, text and
/// candidate lengths.
pub fn assembled_len(blocks: &[usize], texts: &[usize], candidates: &[usize]) -> usize {
    1 + blocks.iter().map(|b| b + 1).sum::<usize>()
        + texts.iter().map(|t| t + 1).sum::<usize>()
        + candidates.iter().map(|c| c + 1).sum::<usize>()
}

/// Lays out `[task, sep, block_1, ..., text_1, sep, ..., sep, cand_1, ...]`.
pub fn assemble_input<'t>(
    scope: &Scope<'t>,
    model: &EncoderDecoder,
    task: Task,
    blocks: &[Var<'t>],
    texts: &[Vec<usize>],
    candidates: &[Vec<usize>],
) -> Result<Var<'t>> {
    if blocks.is_empty() && texts.is_empty() && candidates.is_empty() {
        return Err(Error::Argument("nothing to assemble".into()));
    }
    // Consecutive token runs are gathered in one lookup.
    let mut parts = Vec::new();
    let mut run = vec![task.token_id()];
    for block in blocks {
        run.push(SEP);
        parts.push(model.embed_tokens(scope, &run)?);
        run.clear();
        parts.push(*block);
    }
    for text in texts {
        run.extend_from_slice(text);
        run.push(SEP);
    }
    for cand in candidates {
        run.push(SEP);
        run.extend_from_slice(cand);
    }
    if !run.is_empty() {
        parts.push(model.embed_tokens(scope, &run)?);
    }
    Var::concat_rows(&parts)
}

/// Mean-pooled encoder output followed by an affine map over a fixed number
/// of candidates.
#[derive(Clone, Debug)]
pub struct DiscriminativeHead {
    pub candidates: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl DiscriminativeHead {
    pub fn new(store: &mut ParamStore, model_dim: usize, candidates: usize, rng: &mut impl Rng) -> Result<Self> {
        if candidates < 2 {
            return Err(Error::Config("discriminative head needs at least 2 candidates".into()));
        }
        Ok(DiscriminativeHead {
            candidates,
            w: store.add("disc.head.w", fan_in_uniform(rng, model_dim, candidates))?,
            b: store.add("disc.head.b", Tensor::zeros(&[candidates]))?,
        })
    }

    /// Probabilities `[1 × candidates]`.
    pub fn probabilities<'t>(&self, scope: &Scope<'t>, z: Var<'t>) -> Result<Var<'t>> {
        z.mean_rows()?
            .matmul(scope.p(self.w))?
            .add_row(scope.p(self.b))?
            .softmax(1.0)
    }
}

/// Everything needed to run one model: vocabulary, transformer, modality
/// channels, optional discriminative head, and the parameters they share.
#[derive(Clone, Debug)]
pub struct System {
    pub tokenizer: TextTokenizer,
    pub model: EncoderDecoder,
    pub channels: Vec<ModalityChannel>,
    pub head: Option<DiscriminativeHead>,
    pub store: ParamStore,
}

/// Result of encoding one example.
pub struct Encoded<'t> {
    pub z: Var<'t>,
    pub sampled: Vec<SampledCategories>,
    pub len: usize,
}

impl System {
    pub fn new(
        tokenizer: TextTokenizer,
        model_config: ModelConfig,
        channels: &[(ChannelConfig, usize)],
        head_candidates: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = EncoderDecoder::new(model_config, tokenizer.len(), &mut store, rng)?;
        let table = store.get(model.token_embedding).tensor();
        let mut built = Vec::with_capacity(channels.len());
        for (config, feature_dim) in channels {
            if built.iter().any(|c: &ModalityChannel| c.name() == config.name) {
                return Err(Error::Config(format!("duplicate channel `{}`", config.name)));
            }
            built.push(ModalityChannel::new(
                config.clone(),
                *feature_dim,
                &tokenizer,
                &table,
                &mut store,
                rng,
            )?);
        }
        let head = match head_candidates {
            Some(n) => Some(DiscriminativeHead::new(&mut store, model.config.model_dim, n, rng)?),
            None => None,
        };
        Ok(System {
            tokenizer,
            model,
            channels: built,
            head,
            store,
        })
    }

    pub fn channel(&self, name: &str) -> Option<&ModalityChannel> {
        self.channels.iter().find(|c| c.name() == name)
    }

    /// Block sizes `K·T` of the active channels, in layout order.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.config.sequence_len()).collect()
    }

    pub fn input_len(&self, example: &MultimodalExample) -> usize {
        assembled_len(
            &self.block_sizes(),
            &example.texts.iter().map(Vec::len).collect::<Vec<_>>(),
            &example.candidates.iter().map(Vec::len).collect::<Vec<_>>(),
        )
    }

    /// Tokenizes every channel, assembles the input and runs the encoder.
    pub fn encode<'t>(
        &self,
        scope: &Scope<'t>,
        example: &MultimodalExample,
        path: TokenizationPath,
        sampling: Sampling<'_>,
    ) -> Result<Encoded<'t>> {
        let mut blocks = Vec::with_capacity(self.channels.len());
        let mut sampled = Vec::with_capacity(self.channels.len());
        for (i, channel) in self.channels.iter().enumerate() {
            let features = example.modalities.get(channel.name()).ok_or_else(|| {
                Error::Dataset(format!("example lacks features for channel `{}`", channel.name()))
            })?;
            let out = embed_channel(scope, channel, i, features, path, sampling)?;
            blocks.push(out.embeddings);
            sampled.push(out.sampled);
        }
        let input = assemble_input(
            scope,
            &self.model,
            example.task,
            &blocks,
            &example.texts,
            &example.candidates,
        )?;
        let len = input.shape()[0];
        let z = self.model.encode(scope, input)?;
        Ok(Encoded { z, sampled, len })
    }

    /// Masked mean token cross-entropy of `example.gold` given the encoded input.
    pub fn target_loss<'t>(&self, scope: &Scope<'t>, z: Var<'t>, gold: &[usize]) -> Result<Var<'t>> {
        let logits = self.model.forward_teacher_forced(scope, z, gold)?;
        let mask: Vec<bool> = gold.iter().map(|&t| t != PAD).collect();
        logits.softmax_cross_entropy(gold, &mask)
    }

    /// Tokenization, assembly, encoder, teacher-forced decoder and masked
    /// cross-entropy in one call.
    pub fn sequence_loss<'t>(
        &self,
        scope: &Scope<'t>,
        example: &MultimodalExample,
        path: TokenizationPath,
        sampling: Sampling<'_>,
    ) -> Result<Var<'t>> {
        example.validate()?;
        let enc = self.encode(scope, example, path, sampling)?;
        self.target_loss(scope, enc.z, &example.gold)
    }

    /// Cross-entropy of the discriminative head on the gold candidate index.
    pub fn discriminative_loss<'t>(
        &self,
        scope: &Scope<'t>,
        example: &MultimodalExample,
        gold_index: usize,
        path: TokenizationPath,
        sampling: Sampling<'_>,
    ) -> Result<Var<'t>> {
        let head = self.discriminative_head(example)?;
        if gold_index >= head.candidates {
            return Err(Error::Argument(format!("gold index {gold_index} out of range")));
        }
        let enc = self.encode(scope, example, path, sampling)?;
        head.probabilities(scope, enc.z)?
            .cross_entropy(&[gold_index], &[true])
    }

    /// Head distribution over candidates, computed without gradients.
    pub fn discriminative_probs(
        &self,
        example: &MultimodalExample,
        path: TokenizationPath,
    ) -> Result<Vec<f64>> {
        let head = self.discriminative_head(example)?;
        let tape = Tape::no_grad();
        let scope = Scope::new(&tape, &self.store);
        let enc = self.encode(&scope, example, path, Sampling::Deterministic)?;
        Ok(head.probabilities(&scope, enc.z)?.data().to_vec())
    }

    fn discriminative_head(&self, example: &MultimodalExample) -> Result<&DiscriminativeHead> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no discriminative head".into()))?;
        if example.candidates.len() != head.candidates {
            return Err(Error::Config(format!(
                "discriminative head expects {} candidates, example has {}",
                head.candidates,
                example.candidates.len()
            )));
        }
        Ok(head)
    }

    /// Deterministic encoder output for inference.
    pub fn encode_for_inference(
        &self,
        example: &MultimodalExample,
        path: TokenizationPath,
    ) -> Result<(Tensor, Vec<SampledCategories>)> {
        let tape = Tape::no_grad();
        let scope = Scope::new(&tape, &self.store);
        let enc = self.encode(&scope, example, path, Sampling::Deterministic)?;
        Ok((enc.z.value(), enc.sampled))
    }

    /// Next-token distribution given an encoded input and a history.
    pub fn decode_step(&self, z: &Tensor, history: &[usize]) -> Result<Vec<f64>> {
        let mut lp = self.step_log_probs(z, history)?;
        for v in &mut lp {
            *v = v.exp();
        }
        Ok(lp)
    }

    /// Log-probabilities of the next token.
    pub fn step_log_probs(&self, z: &Tensor, history: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::no_grad();
        let scope = Scope::new(&tape, &self.store);
        let zv = scope.constant(z.clone());
        let logits = self.model.decode(&scope, zv, history)?;
        let data = logits.data();
        let v = self.model.vocab_size;
        let last = &data[data.len() - v..];
        let lse = kernels::log_sum_exp(last);
        Ok(last.iter().map(|x| x - lse).collect())
    }
}
