//! Synthetic benchmark: a world with known latent categories, deliberately
//! miscalibrated classifiers, and the metrics used to compare models on it.

pub mod metrics;
mod pretrain;
pub mod tfidf;
mod world;

pub use pretrain::{clean_accuracy, pretrain_classifier, PretrainConfig, PretrainReport};
pub use world::{
    corrupted_label_sets, generate_world, Corruption, nearest_mean, records_from_jsonl, records_to_jsonl,
    ModalityLatent, ModalitySpec, QuestionTemplate, Record, Split, World, WorldConfig,
    SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::decoding::{
    beam_search, greedy_decode, score_candidates, CandidatePlacement, EncodedScorer,
};
use crate::error::{Error, Result};
use crate::model::System;
use crate::text::TextTokenizer;
use crate::tokenization::TokenizationPath;
use crate::training::TrainItem;
use metrics::{corpus_bleu, exact_match, rouge_l, DEFAULT_ROUGE_BETA};

/// Converts dataset records into token-level training items.
pub fn to_items(
    records: &[Record],
    tokenizer: &TextTokenizer,
    candidates_in_input: bool,
) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .enumerate()
        .map(|(id, r)| {
            Ok(TrainItem {
                id,
                modalities: r.features.clone(),
                question: tokenizer.tokenize(&r.question)?,
                answer: tokenizer.tokenize(&r.answer)?,
                candidates: r
                    .candidates
                    .iter()
                    .map(|c| tokenizer.tokenize(c))
                    .collect::<Result<_>>()?,
                candidates_in_input,
                gold_index: Some(r.gold_index),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Generate,
    ScoreCandidates,
}

fn default_beam() -> usize {
    crate::decoding::DEFAULT_BEAM_WIDTH
}

fn default_max_len() -> usize {
    crate::decoding::DEFAULT_MAX_LEN
}

fn yes() -> bool {
    true
}

fn default_beta() -> f64 {
    DEFAULT_ROUGE_BETA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// 1 means greedy decoding.
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "yes")]
    pub length_norm: bool,
    #[serde(default = "default_beta")]
    pub rouge_beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: default_beam(),
            max_len: default_max_len(),
            length_norm: true,
            rouge_beta: DEFAULT_ROUGE_BETA,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 || self.max_len < 1 {
            return Err(Error::Config("beam_width and max_len must be ≥ 1".into()));
        }
        if !(self.rouge_beta > 0.0) {
            return Err(Error::Config("rouge_beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub generated: usize,
    pub exact_match: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub scored: usize,
    pub top1: f64,
}

impl MetricReport {
    pub const HEADER: &'static str =
        "generated\texact_match\tbleu1\tbleu2\tbleu3\tbleu4\trouge_l\tscored\ttop1";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.generated,
            self.exact_match,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.scored,
            self.top1
        )
    }

    /// Merges a generation report and a scoring report.
    pub fn merge(&self, other: &MetricReport) -> MetricReport {
        let pick = |a: usize, b: usize| if a > 0 { a } else { b };
        MetricReport {
            generated: pick(self.generated, other.generated),
            exact_match: if self.generated > 0 { self.exact_match } else { other.exact_match },
            bleu: if self.generated > 0 { self.bleu } else { other.bleu },
            rouge_l: if self.generated > 0 { self.rouge_l } else { other.rouge_l },
            scored: pick(self.scored, other.scored),
            top1: if self.scored > 0 { self.top1 } else { other.top1 },
        }
    }
}

/// Per-example evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutput {
    pub index: usize,
    pub generated: Option<String>,
    pub selected: Option<usize>,
    pub losses: Vec<f64>,
    /// `(channel, category)` pairs chosen by the tokenizer.
    pub sampled: Vec<(String, usize)>,
}

/// Generates an answer for one item.
pub fn generate_answer(
    system: &System,
    item: &TrainItem,
    path: TokenizationPath,
    config: &EvalConfig,
) -> Result<(Vec<usize>, Vec<(String, usize)>)> {
    let example = item.qa_example(&item.question);
    let (z, sampled) = system.encode_for_inference(&example, path)?;
    let scorer = EncodedScorer { system, z };
    let hyp = if config.beam_width == 1 {
        greedy_decode(&scorer, config.max_len)?
    } else {
        beam_search(&scorer, config.beam_width, config.max_len, config.length_norm)?
    };
    let picked = system
        .channels
        .iter()
        .zip(&sampled)
        .flat_map(|(c, s)| s.indices.iter().map(move |&i| (c.name().to_string(), i)))
        .collect();
    Ok((hyp.tokens, picked))
}

/// Selects a candidate, by mean NLL for generative systems and by the head
/// for discriminative ones. Returns the index and the per-candidate losses.
pub fn select_candidate(
    system: &System,
    item: &TrainItem,
    path: TokenizationPath,
) -> Result<(usize, Vec<f64>)> {
    if system.head.is_some() {
        let example = item.qa_example(&item.question);
        let p = system.discriminative_probs(&example, path)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        return Ok((best, p.iter().map(|v| -v.max(f64::MIN_POSITIVE).ln()).collect()));
    }
    let placement = if item.candidates_in_input {
        CandidatePlacement::InInput
    } else {
        CandidatePlacement::HeldOut
    };
    let base = item.qa_example(&item.question);
    let (j, scores) = score_candidates(system, &base, &item.candidates, path, placement)?;
    Ok((j, scores.iter().map(|s| s.loss).collect()))
}

/// Runs one evaluation mode over `items`, whose gold answers come from `records`.
pub fn evaluate(
    system: &System,
    items: &[TrainItem],
    records: &[Record],
    path: TokenizationPath,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<(MetricReport, Vec<ExampleOutput>)> {
    config.validate()?;
    if items.len() != records.len() || items.is_empty() {
        return Err(Error::Dataset("evaluation needs matching, nonempty items and records".into()));
    }
    let mut report = MetricReport::default();
    let mut outputs = Vec::with_capacity(items.len());
    match mode {
        EvalMode::Generate => {
            if system.head.is_some() {
                return Err(Error::Config("a discriminative model cannot generate".into()));
            }
            let mut pairs = Vec::with_capacity(items.len());
            let mut hits = 0;
            let mut rouge = 0.0;
            for (i, (item, record)) in items.iter().zip(records).enumerate() {
                let (tokens, sampled) = generate_answer(system, item, path, config)?;
                let text = system.tokenizer.detokenize_generated(&tokens);
                hits += exact_match(&text, &record.answer) as usize;
                let c: Vec<String> = text.split_whitespace().map(str::to_string).collect();
                let r: Vec<String> = record.answer.split_whitespace().map(str::to_string).collect();
                rouge += rouge_l(&c, &r, config.rouge_beta);
                pairs.push((c, r));
                outputs.push(ExampleOutput {
                    index: i,
                    generated: Some(text),
                    selected: None,
                    losses: Vec::new(),
                    sampled,
                });
            }
            let n = items.len() as f64;
            report.generated = items.len();
            report.exact_match = hits as f64 / n;
            report.rouge_l = rouge / n;
            for k in 1..=4 {
                report.bleu[k - 1] = corpus_bleu(&pairs, k);
            }
        }
        EvalMode::ScoreCandidates => {
            let mut hits = 0;
            for (i, (item, record)) in items.iter().zip(records).enumerate() {
                let (j, losses) = select_candidate(system, item, path)?;
                hits += (j == record.gold_index) as usize;
                outputs.push(ExampleOutput {
                    index: i,
                    generated: None,
                    selected: Some(j),
                    losses,
                    sampled: Vec::new(),
                });
            }
            report.scored = items.len();
            report.top1 = hits as f64 / items.len() as f64;
        }
    }
    Ok((report, outputs))
}
