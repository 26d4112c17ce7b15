//! Training regimes: question answering, joint question generation, cycle
//! consistency, and the discriminative-head baseline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decoding::{greedy_decode, EncodedScorer};
use crate::error::{Error, Result};
use crate::model::{with_eos, MultimodalExample, System};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{AdamConfig, AdamState, Gradients, Scope, Tape, Var};
use crate::text::{Task, EOS};
use crate::tokenization::{Sampling, TokenizationPath};

const DATA_STREAM: u64 = 0xDA7A;
const EPOCH_STREAM: u64 = 0xE90C;
const PASS_QA: u64 = 1;
const PASS_QG: u64 = 2;
const PASS_ANSWER_CYCLE: u64 = 3;
const PASS_QUESTION_CYCLE: u64 = 4;
const PASS_DISC: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "qa")]
    Qa,
    #[serde(rename = "qa+qg")]
    QaQg,
    #[serde(rename = "cycle")]
    Cycle,
    #[serde(rename = "discriminative")]
    Discriminative,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Qa, Regime::QaQg, Regime::Cycle, Regime::Discriminative];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Qa => "qa",
            Regime::QaQg => "qa+qg",
            Regime::Cycle => "cycle",
            Regime::Discriminative => "discriminative",
        }
    }

    pub fn is_generative(self) -> bool {
        self != Regime::Discriminative
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn yes() -> bool {
    true
}

fn default_cycle_start() -> usize {
    2
}

fn default_decode_len() -> usize {
    crate::decoding::DEFAULT_MAX_LEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of `epochs` at which the learning rate drops tenfold.
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    /// Filled from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "one")]
    pub data_fraction: f64,
    /// Include the question-generation loss (qa+qg and cycle).
    #[serde(default = "yes")]
    pub question_generation: bool,
    /// Include the two consistency losses (cycle).
    #[serde(default = "yes")]
    pub cycle_branches: bool,
    /// First epoch, counted from 1, in which the consistency losses apply.
    #[serde(default = "default_cycle_start")]
    pub cycle_start_epoch: usize,
    #[serde(default = "default_decode_len")]
    pub max_decode_len: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Qa,
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            milestones: default_milestones(),
            seed: 0,
            data_fraction: 1.0,
            question_generation: true,
            cycle_branches: true,
            cycle_start_epoch: default_cycle_start(),
            max_decode_len: default_decode_len(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m < 1.0) {
                return Err(Error::Config(format!(
                    "milestones {:?} must be strictly increasing in (0, 1)",
                    self.milestones
                )));
            }
            prev = m;
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {} must lie in (0, 1]",
                self.data_fraction
            )));
        }
        if self.max_decode_len < 1 {
            return Err(Error::Config("max_decode_len must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch: divided by 10 at every milestone
    /// already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs as f64;
        let drops = self.milestones.iter().filter(|&&m| progress >= m).count();
        let mut lr = self.lr;
        for _ in 0..drops {
            lr /= 10.0;
        }
        lr
    }

    fn question_generation_active(&self) -> bool {
        matches!(self.regime, Regime::QaQg | Regime::Cycle) && self.question_generation
    }

    fn cycle_active(&self, epoch: usize) -> bool {
        self.regime == Regime::Cycle && self.cycle_branches && epoch + 1 >= self.cycle_start_epoch
    }
}

/// Indices of the training subset: a `⌈N·f⌉` prefix of a seed-shuffled order.
pub fn select_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[DATA_STREAM]));
    // The tolerance keeps products like 2000 × 0.1 from rounding up.
    let take = ((n as f64 * fraction) - 1e-9).ceil().max(1.0) as usize;
    order.truncate(take.min(n));
    order
}

/// One question-answer pair with its modality features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    /// Stable dataset index; feeds the per-example noise streams.
    pub id: usize,
    pub modalities: BTreeMap<String, Vec<f64>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    /// Candidate answers (may be empty).
    pub candidates: Vec<Vec<usize>>,
    /// Whether the candidates are part of the answering input.
    pub candidates_in_input: bool,
    pub gold_index: Option<usize>,
}

impl TrainItem {
    /// Answer generation from a question.
    pub fn qa_example(&self, question: &[usize]) -> MultimodalExample {
        MultimodalExample {
            task: Task::Answer,
            modalities: self.modalities.clone(),
            texts: vec![question.to_vec()],
            candidates: if self.candidates_in_input {
                self.candidates.clone()
            } else {
                Vec::new()
            },
            gold: with_eos(&self.answer),
        }
    }

    /// Question generation from an answer.
    pub fn qg_example(&self, answer: &[usize]) -> MultimodalExample {
        MultimodalExample {
            task: Task::Question,
            modalities: self.modalities.clone(),
            texts: vec![answer.to_vec()],
            candidates: Vec::new(),
            gold: with_eos(&self.question),
        }
    }
}

/// Per-example loss terms; absent terms were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub qa: Option<f64>,
    pub qg: Option<f64>,
    pub answer_consistency: Option<f64>,
    pub question_consistency: Option<f64>,
    pub discriminative: Option<f64>,
}

/// Sequences produced during one cycle pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleBatchTrace {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub generated_answer: Vec<usize>,
    pub generated_question: Vec<usize>,
    pub regenerated_answer: Vec<usize>,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Examples whose consistency terms were skipped after a degenerate decode.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub examples_used: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// Tab-separated step log with a header row.
    pub fn step_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("epoch\tstep\tlr\tloss\tqa\tqg\tanswer_cons\tquestion_cons\tdisc\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{}\t{}\t{:e}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
                r.epoch + 1,
                r.step,
                r.lr,
                r.loss,
                f(r.terms.qa),
                f(r.terms.qg),
                f(r.terms.answer_consistency),
                f(r.terms.question_consistency),
                f(r.terms.discriminative),
            ));
        }
        s
    }
}

fn strip_eos(tokens: &[usize]) -> Vec<usize> {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => tokens[..i].to_vec(),
        None => tokens.to_vec(),
    }
}

/// Owns the optimizer state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub path: TokenizationPath,
    pub adam: AdamState,
    step: usize,
}

struct ExampleOutcome {
    grads: Gradients,
    loss: f64,
    terms: LossTerms,
    skipped: bool,
}

impl Trainer {
    pub fn new(system: &System, config: TrainConfig, path: TokenizationPath) -> Result<Self> {
        config.validate()?;
        if config.regime == Regime::Discriminative && system.head.is_none() {
            return Err(Error::Config("discriminative regime needs a candidate head".into()));
        }
        let adam = AdamState::new(
            &system.store,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Trainer {
            config,
            path,
            adam,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn sampling(&self, item: &TrainItem, pass: u64) -> Sampling<'static> {
        Sampling::Gumbel {
            seed: derive_seed(self.config.seed, &[self.step as u64, item.id as u64, pass]),
        }
    }

    fn greedy(&self, system: &System, example: &MultimodalExample) -> Result<Vec<usize>> {
        let scorer = EncodedScorer::new(system, example, self.path)?;
        Ok(strip_eos(&greedy_decode(&scorer, self.config.max_decode_len)?.tokens))
    }

    /// Loss terms of one example on a fresh tape, combined as an equal-weight mean.
    pub fn example_loss<'t>(
        &self,
        scope: &Scope<'t>,
        system: &System,
        item: &TrainItem,
        epoch: usize,
    ) -> Result<(Var<'t>, LossTerms, Option<CycleBatchTrace>)> {
        let mut terms = LossTerms::default();
        if self.config.regime == Regime::Discriminative {
            let gold = item
                .gold_index
                .ok_or_else(|| Error::Dataset("discriminative training needs a gold index".into()))?;
            let loss = system.discriminative_loss(
                scope,
                &item.qa_example(&item.question),
                gold,
                self.path,
                self.sampling(item, PASS_DISC),
            )?;
            terms.discriminative = Some(loss.item());
            return Ok((loss, terms, None));
        }
        let qa = system.sequence_loss(
            scope,
            &item.qa_example(&item.question),
            self.path,
            self.sampling(item, PASS_QA),
        )?;
        terms.qa = Some(qa.item());
        let mut parts = vec![qa];
        if self.config.question_generation_active() {
            let qg = system.sequence_loss(
                scope,
                &item.qg_example(&item.answer),
                self.path,
                self.sampling(item, PASS_QG),
            )?;
            terms.qg = Some(qg.item());
            parts.push(qg);
        }
        let mut trace = None;
        if self.config.cycle_active(epoch) {
            let generated_answer = self.greedy(system, &item.qa_example(&item.question))?;
            let generated_question = if generated_answer.is_empty() {
                Vec::new()
            } else {
                self.greedy(system, &item.qg_example(&generated_answer))?
            };
            if !generated_question.is_empty() {
                let answer_cycle = system.sequence_loss(
                    scope,
                    &item.qa_example(&generated_question),
                    self.path,
                    self.sampling(item, PASS_ANSWER_CYCLE),
                )?;
                let question_cycle = system.sequence_loss(
                    scope,
                    &item.qg_example(&generated_answer),
                    self.path,
                    self.sampling(item, PASS_QUESTION_CYCLE),
                )?;
                terms.answer_consistency = Some(answer_cycle.item());
                terms.question_consistency = Some(question_cycle.item());
                parts.push(answer_cycle);
                parts.push(question_cycle);
            }
            trace = Some(CycleBatchTrace {
                question: item.question.clone(),
                answer: item.answer.clone(),
                regenerated_answer: if generated_question.is_empty() {
                    Vec::new()
                } else {
                    self.greedy(system, &item.qa_example(&generated_question))?
                },
                generated_answer,
                generated_question,
                terms: terms.clone(),
            });
        }
        let loss = if parts.len() == 1 {
            parts[0]
        } else {
            Var::mean_of(&parts)?
        };
        Ok((loss, terms, trace))
    }

    fn run_example(
        &self,
        system: &System,
        item: &TrainItem,
        epoch: usize,
        scale: f64,
    ) -> Result<ExampleOutcome> {
        let tape = Tape::new();
        let scope = Scope::new(&tape, &system.store);
        let (loss, terms, trace) = self.example_loss(&scope, system, item, epoch)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                step: self.step as u64,
                loss: value,
            });
        }
        let skipped = self.config.cycle_active(epoch)
            && trace.is_some_and(|t| t.terms.answer_consistency.is_none());
        let grads = tape.backward(loss.scale(scale))?;
        Ok(ExampleOutcome {
            grads,
            loss: value,
            terms,
            skipped,
        })
    }

    /// One optimizer step over `batch`. Per-example gradients are summed in
    /// batch order, each scaled by `1/|batch|`.
    pub fn train_step(
        &mut self,
        system: &mut System,
        batch: &[&TrainItem],
        epoch: usize,
    ) -> Result<(StepRecord, usize)> {
        let lr = self.config.lr_at(epoch);
        self.adam.set_lr(lr);
        system.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut skipped = 0;
        let mut terms: Vec<LossTerms> = Vec::with_capacity(batch.len());
        for item in batch {
            let out = self.run_example(system, item, epoch, scale)?;
            out.grads.accumulate_into(&mut system.store);
            loss += out.loss * scale;
            skipped += out.skipped as usize;
            terms.push(out.terms);
        }
        self.adam.step(&mut system.store)?;
        let mean = |f: fn(&LossTerms) -> Option<f64>| {
            let v: Vec<f64> = terms.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let record = StepRecord {
            epoch,
            step: self.step,
            lr,
            loss,
            terms: LossTerms {
                qa: mean(|t| t.qa),
                qg: mean(|t| t.qg),
                answer_consistency: mean(|t| t.answer_consistency),
                question_consistency: mean(|t| t.question_consistency),
                discriminative: mean(|t| t.discriminative),
            },
        };
        self.step += 1;
        Ok((record, skipped))
    }

    /// Full run over the configured subset of `items`.
    pub fn train(&mut self, system: &mut System, items: &[TrainItem]) -> Result<TrainReport> {
        if items.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let subset = select_subset(items.len(), self.config.data_fraction, self.config.seed);
        let mut report = TrainReport {
            examples_used: subset.len(),
            ..TrainReport::default()
        };
        for epoch in 0..self.config.epochs {
            let mut order = subset.clone();
            order.shuffle(&mut rng_for(self.config.seed, &[EPOCH_STREAM, epoch as u64]));
            let mut total = 0.0;
            let mut skipped = 0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
                let (record, s) = self.train_step(system, &batch, epoch)?;
                total += record.loss;
                skipped += s;
                batches += 1;
                report.steps.push(record);
            }
            let mean_loss = total / batches as f64;
            if skipped > 0 {
                log::info!("epoch {}: {skipped} degenerate decodes skipped", epoch + 1);
            }
            log::debug!("epoch {} loss {mean_loss:.4}", epoch + 1);
            report.epochs.push(EpochRecord {
                epoch,
                lr: self.config.lr_at(epoch),
                mean_loss,
                skipped,
            });
        }
        Ok(report)
    }
}
