use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, DetRng};

pub const SCHEMA_VERSION: u32 = 1;

const VIDEO_NAMES: [&str; 20] = [
    "playing guitar",
    "riding bike",
    "cooking pasta",
    "swimming laps",
    "reading book",
    "painting wall",
    "juggling balls",
    "brushing horse",
    "washing car",
    "playing chess",
    "throwing frisbee",
    "climbing rock",
    "rowing boat",
    "lifting weights",
    "baking bread",
    "skiing downhill",
    "surfing waves",
    "writing letter",
    "planting tree",
    "flying kite",
];

const AUDIO_NAMES: [&str; 10] = [
    "dog barking",
    "baby crying",
    "car honking",
    "bell ringing",
    "rain falling",
    "crowd cheering",
    "phone buzzing",
    "bird singing",
    "door slamming",
    "wind howling",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub num_categories: usize,
    pub feature_dim: usize,
    /// Category names; generated as `<name> <index>` when empty.
    #[serde(default)]
    pub category_names: Vec<String>,
}

impl ModalitySpec {
    pub fn names(&self) -> Vec<String> {
        if !self.category_names.is_empty() {
            return self.category_names.clone();
        }
        let builtin: &[&str] = match self.name.as_str() {
            "video" => &VIDEO_NAMES,
            "audio" => &AUDIO_NAMES,
            _ => &[],
        };
        if builtin.len() >= self.num_categories {
            builtin[..self.num_categories].iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.num_categories).map(|i| format!("{} {i}", self.name)).collect()
        }
    }

    /// Tokens per category name (the longest name).
    pub fn name_len(&self) -> usize {
        self.names()
            .iter()
            .map(|n| n.split_whitespace().count())
            .max()
            .unwrap_or(1)
    }
}

/// A question phrasing whose answer is the category of `modality`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTemplate {
    pub modality: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub modalities: Vec<ModalitySpec>,
    pub templates: Vec<QuestionTemplate>,
    /// Feature noise scale.
    pub sigma: f64,
    /// Fraction of categories whose pretraining labels are corrupted.
    pub rho: f64,
    /// Spread of the per-category mean vectors.
    #[serde(default = "unit")]
    pub mean_scale: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Candidate answers per example, including the gold one.
    pub candidates: usize,
    pub corruption: Corruption,
}

/// How the pretraining labels of the corrupted categories are rewritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// Corrupted categories are paired up and every pretraining example of
    /// either category is labelled with one of the two, uniformly. The
    /// classifier cannot tell the pair apart from its labels alone.
    Confusion,
    /// Cyclic relabelling within the corrupted subset, a fixed permutation.
    Derangement,
}

fn unit() -> f64 {
    1.0
}

impl Default for WorldConfig {
    fn default() -> Self {
        let t = |m: &str, s: &str| QuestionTemplate {
            modality: m.into(),
            text: s.into(),
        };
        WorldConfig {
            modalities: vec![
                ModalitySpec {
                    name: "video".into(),
                    num_categories: 20,
                    feature_dim: 16,
                    category_names: Vec::new(),
                },
                ModalitySpec {
                    name: "audio".into(),
                    num_categories: 10,
                    feature_dim: 16,
                    category_names: Vec::new(),
                },
            ],
            templates: vec![
                t("video", "what is happening in the video"),
                t("video", "what is the person doing"),
                t("video", "which activity is shown"),
                t("audio", "what sound can be heard"),
                t("audio", "what is making the noise"),
                t("audio", "which sound is in the audio"),
            ],
            sigma: 0.5,
            rho: 0.3,
            mean_scale: 1.0,
            train_size: 2000,
            val_size: 500,
            test_size: 500,
            candidates: 5,
            corruption: Corruption::Confusion,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("world needs at least one question template".into()));
        }
        for m in &self.modalities {
            if m.num_categories < 2 {
                return Err(Error::Config(format!("modality `{}` needs ≥ 2 categories", m.name)));
            }
            if m.feature_dim < 1 {
                return Err(Error::Config(format!("modality `{}` needs features", m.name)));
            }
            let names = m.names();
            if names.len() != m.num_categories {
                return Err(Error::Config(format!(
                    "modality `{}`: {} names for {} categories",
                    m.name,
                    names.len(),
                    m.num_categories
                )));
            }
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != names.len() {
                return Err(Error::Config(format!("modality `{}` repeats a category name", m.name)));
            }
            if m.num_categories < self.candidates {
                return Err(Error::Config(format!(
                    "modality `{}` has {} categories, fewer than {} candidates",
                    m.name, m.num_categories, self.candidates
                )));
            }
        }
        for t in &self.templates {
            if !self.modalities.iter().any(|m| m.name == t.modality) {
                return Err(Error::Config(format!(
                    "template `{}` refers to missing modality `{}`",
                    t.text, t.modality
                )));
            }
        }
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("sigma must be ≥ 0 and rho in [0, 1]".into()));
        }
        if self.candidates < 2 {
            return Err(Error::Config("need at least 2 candidates".into()));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train split is empty".into()));
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// Every text the model can read or write.
    pub fn corpus(&self) -> Vec<String> {
        let mut out: Vec<String> = self.templates.iter().map(|t| t.text.clone()).collect();
        for m in &self.modalities {
            out.extend(m.names());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub features: BTreeMap<String, Vec<f64>>,
    pub latent: BTreeMap<String, usize>,
    /// Modality the question asks about.
    pub asks: String,
    pub question: String,
    pub answer: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
}

/// Per-modality latent structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityLatent {
    pub name: String,
    pub means: Vec<Vec<f64>>,
    /// Pretraining labels each true category is drawn from, uniformly.
    pub label_sets: Vec<Vec<usize>>,
}

impl ModalityLatent {
    /// Fraction of categories always labelled as themselves.
    pub fn fixed_point_rate(&self) -> f64 {
        let fixed = self
            .label_sets
            .iter()
            .enumerate()
            .filter(|(i, l)| l.as_slice() == [*i])
            .count();
        fixed as f64 / self.label_sets.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub latents: Vec<ModalityLatent>,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl World {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn latent(&self, modality: &str) -> Option<&ModalityLatent> {
        self.latents.iter().find(|l| l.name == modality)
    }

    /// Answer to a question about `modality` given the true categories.
    pub fn answer_for(&self, modality: &str, latent: &BTreeMap<String, usize>) -> Result<String> {
        let spec = self
            .config
            .modality(modality)
            .ok_or_else(|| Error::Config(format!("unknown modality `{modality}`")))?;
        let c = *latent
            .get(modality)
            .ok_or_else(|| Error::Dataset(format!("record lacks latent `{modality}`")))?;
        Ok(spec.names()[c].clone())
    }

    /// Pretraining label of the `index`-th training record for `modality`.
    pub fn pretrain_label(&self, modality: &str, index: usize) -> Result<usize> {
        let m = self
            .latents
            .iter()
            .position(|l| l.name == modality)
            .ok_or_else(|| Error::Config(format!("unknown modality `{modality}`")))?;
        let record = self
            .train
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("no training record {index}")))?;
        let set = &self.latents[m].label_sets[record.latent[modality]];
        Ok(if set.len() == 1 {
            set[0]
        } else {
            set[rng_for(self.seed, &[DRAW_STREAM, m as u64, index as u64]).gen_range(0..set.len())]
        })
    }
}

/// Pretraining label set of every category. A shuffled subset of
/// `round(rho·C)` categories is corrupted; the rest keep `{c}`. With an odd
/// subset under `Confusion`, the leftover category is mixed with a random
/// clean one, whose own labels stay clean.
pub fn corrupted_label_sets(
    categories: usize,
    rho: f64,
    kind: Corruption,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..categories).map(|c| vec![c]).collect();
    let count = (rho * categories as f64).round() as usize;
    let mut order: Vec<usize> = (0..categories).collect();
    order.shuffle(rng);
    let (chosen, kept) = order.split_at(count.min(categories));
    match kind {
        Corruption::Derangement => {
            if chosen.len() >= 2 {
                for (i, &c) in chosen.iter().enumerate() {
                    sets[c] = vec![chosen[(i + 1) % chosen.len()]];
                }
            }
        }
        Corruption::Confusion => {
            for pair in chosen.chunks(2) {
                match *pair {
                    [a, b] => {
                        let mixed = vec![a.min(b), a.max(b)];
                        sets[a] = mixed.clone();
                        sets[b] = mixed;
                    }
                    [a] if !kept.is_empty() => {
                        let k = kept[rng.gen_range(0..kept.len())];
                        sets[a] = vec![a.min(k), a.max(k)];
                    }
                    _ => {}
                }
            }
        }
    }
    sets
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

const MEAN_STREAM: u64 = 0x3EA5;
const LABEL_STREAM: u64 = 0x1AB3;
const EXAMPLE_STREAM: u64 = 0xE8A3;
const DRAW_STREAM: u64 = 0xD2A7;

fn make_record(
    config: &WorldConfig,
    latents: &[ModalityLatent],
    names: &[Vec<String>],
    id: String,
    rng: &mut DetRng,
) -> Record {
    let mut features = BTreeMap::new();
    let mut latent = BTreeMap::new();
    for (m, spec) in config.modalities.iter().enumerate() {
        let c = rng.gen_range(0..spec.num_categories);
        let noise = normal_vec(rng, spec.feature_dim, config.sigma);
        let x = latents[m].means[c].iter().zip(noise).map(|(a, b)| a + b).collect();
        features.insert(spec.name.clone(), x);
        latent.insert(spec.name.clone(), c);
    }
    let template = &config.templates[rng.gen_range(0..config.templates.len())];
    let m = config
        .modalities
        .iter()
        .position(|s| s.name == template.modality)
        .expect("templates validated");
    let gold = latent[&template.modality];
    let mut others: Vec<usize> = (0..config.modalities[m].num_categories)
        .filter(|&c| c != gold)
        .collect();
    others.shuffle(rng);
    let mut candidates: Vec<String> = others[..config.candidates - 1]
        .iter()
        .map(|&c| names[m][c].clone())
        .collect();
    let gold_index = rng.gen_range(0..config.candidates);
    candidates.insert(gold_index, names[m][gold].clone());
    Record {
        id,
        features,
        latent,
        asks: template.modality.clone(),
        question: template.text.clone(),
        answer: names[m][gold].clone(),
        candidates,
        gold_index,
    }
}

/// Generates the latent structure and all three splits from `seed`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut latents = Vec::new();
    for (m, spec) in config.modalities.iter().enumerate() {
        let mut rng = rng_for(seed, &[MEAN_STREAM, m as u64]);
        let means = (0..spec.num_categories)
            .map(|_| normal_vec(&mut rng, spec.feature_dim, config.mean_scale))
            .collect();
        let label_sets = corrupted_label_sets(
            spec.num_categories,
            config.rho,
            config.corruption,
            &mut rng_for(seed, &[LABEL_STREAM, m as u64]),
        );
        latents.push(ModalityLatent {
            name: spec.name.clone(),
            means,
            label_sets,
        });
    }
    let names: Vec<Vec<String>> = config.modalities.iter().map(|m| m.names()).collect();
    let split = |s: Split, n: usize| -> Vec<Record> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(seed, &[EXAMPLE_STREAM, s.tag(), i as u64]);
                make_record(config, &latents, &names, format!("{}-{i:05}", s.as_str()), &mut rng)
            })
            .collect()
    };
    Ok(World {
        schema_version: SCHEMA_VERSION,
        seed,
        train: split(Split::Train, config.train_size),
        val: split(Split::Val, config.val_size),
        test: split(Split::Test, config.test_size),
        config: config.clone(),
        latents,
    })
}

/// Line-delimited JSON, one record per line.
pub fn records_to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Dataset(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Index of the mean closest to `x` (the Bayes rule for isotropic noise
/// and uniform priors).
pub fn nearest_mean(means: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for (i, m) in means.iter().enumerate() {
        if dist(m) < dist(&means[best]) {
            best = i;
        }
    }
    best
}
