//! Experiment configuration and the end-to-end pipeline: world, classifier
//! pretraining, training, evaluation, and the sweep and ablation drivers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    clean_accuracy, evaluate, generate_world, pretrain_classifier, to_items, EvalConfig, EvalMode,
    MetricReport, PretrainConfig, PretrainReport, Split, World, WorldConfig,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, System};
use crate::rng::rng_for;
use crate::text::TextTokenizer;
use crate::tokenization::{ChannelConfig, TokenizationPath};
use crate::training::{Regime, TrainConfig, TrainItem, TrainReport, Trainer};

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSettings {
    /// Categories emitted per example.
    pub k: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizationSettings {
    pub path: TokenizationPath,
    /// Modalities fed to the model, in layout order; all world modalities when absent.
    pub modalities: Option<Vec<String>>,
    pub channels: BTreeMap<String, ChannelSettings>,
}

impl Default for TokenizationSettings {
    fn default() -> Self {
        TokenizationSettings {
            path: TokenizationPath::Differentiable,
            modalities: None,
            channels: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Put the candidate answers into the answering input.
    pub candidates_in_input: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            candidates_in_input: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub modality_sets: Vec<Vec<String>>,
    pub paths: Vec<TokenizationPath>,
    pub regimes: Vec<Regime>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            modality_sets: Vec::new(),
            paths: TokenizationPath::ALL.to_vec(),
            regimes: vec![Regime::Qa],
            fractions: vec![1.0],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    /// Channel tuned first, with `second` excluded.
    pub first: String,
    pub second: String,
    pub first_k: Vec<usize>,
    pub second_k: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            first: "video".into(),
            second: "audio".into(),
            first_k: vec![4, 8, 12, 16],
            second_k: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub tokenization: TokenizationSettings,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataSettings,
    pub ablate: AblationGrid,
    pub sweep: SweepGrid,
}

/// Paper defaults for the two standard modalities; half the categories otherwise.
pub fn default_k(modality: &str, categories: usize) -> usize {
    match modality {
        "video" => 12,
        "audio" => 6,
        _ => (categories / 2).max(1),
    }
    .min(categories)
}

impl ExperimentConfig {
    /// Active modality names in layout order.
    pub fn active_modalities(&self) -> Vec<String> {
        match &self.tokenization.modalities {
            Some(m) => m.clone(),
            None => self.world.modalities.iter().map(|m| m.name.clone()).collect(),
        }
    }

    /// Channel configs for the active modalities, with feature widths.
    pub fn channel_configs(&self) -> Result<Vec<(ChannelConfig, usize)>> {
        self.active_modalities()
            .iter()
            .map(|name| {
                let spec = self.world.modality(name).ok_or_else(|| {
                    Error::Config(format!("modality `{name}` is not part of the world"))
                })?;
                let settings = self.tokenization.channels.get(name).cloned().unwrap_or_default();
                let config = ChannelConfig {
                    name: name.clone(),
                    num_categories: spec.num_categories,
                    k: settings.k.unwrap_or_else(|| default_k(name, spec.num_categories)),
                    name_len: spec.name_len(),
                    temperature: settings.temperature.unwrap_or(1.0),
                    category_names: spec.names(),
                };
                config.validate()?;
                Ok((config, spec.feature_dim))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train_config().validate()?;
        self.eval.validate()?;
        for name in self.tokenization.channels.keys() {
            if self.world.modality(name).is_none() {
                return Err(Error::Config(format!("settings for unknown channel `{name}`")));
            }
        }
        let active = self.active_modalities();
        for (i, m) in active.iter().enumerate() {
            if active[..i].contains(m) {
                return Err(Error::Config(format!("modality `{m}` listed twice")));
            }
        }
        self.channel_configs()?;
        if self.train.regime == Regime::Discriminative && !self.data.candidates_in_input {
            return Err(Error::Config(
                "the discriminative head needs candidates in the input".into(),
            ));
        }
        Ok(())
    }

    /// Training settings with the experiment seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses TOML text, then applies `key.path=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(config)
    }

    /// Defaults, then the file (if any), then overrides, then the seed flag.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut config = Self::from_toml_with_overrides(&text, overrides)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Tokenizer over every text of the world.
pub fn build_tokenizer(world: &WorldConfig) -> Result<TextTokenizer> {
    let corpus = world.corpus();
    TextTokenizer::build(corpus.iter().map(String::as_str))
}

/// Fresh model for the config, before pretraining.
pub fn build_system(config: &ExperimentConfig) -> Result<System> {
    let tokenizer = build_tokenizer(&config.world)?;
    let head = (config.train.regime == Regime::Discriminative).then_some(config.world.candidates);
    System::new(
        tokenizer,
        config.model.clone(),
        &config.channel_configs()?,
        head,
        &mut rng_for(config.seed, &[INIT_STREAM]),
    )
}

/// Pretrains every channel classifier on the world.
pub fn pretrain_all(
    system: &mut System,
    world: &World,
    config: &PretrainConfig,
) -> Result<Vec<PretrainReport>> {
    let names: Vec<String> = system.channels.iter().map(|c| c.name().to_string()).collect();
    names
        .iter()
        .map(|n| pretrain_classifier(system, n, world, config))
        .collect()
}

pub fn split_items(config: &ExperimentConfig, system: &System, world: &World, split: Split) -> Result<Vec<TrainItem>> {
    to_items(world.split(split), &system.tokenizer, config.data.candidates_in_input)
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub system: System,
    pub pretrain: Vec<PretrainReport>,
    /// Clean-label classifier accuracy on the evaluation split, before and after training.
    pub classifier_before: BTreeMap<String, f64>,
    pub classifier_after: BTreeMap<String, f64>,
    pub train: TrainReport,
    pub metrics: MetricReport,
    pub input_len: usize,
}

/// Pretrained system for the config, plus the world it was fitted on.
pub fn prepare(config: &ExperimentConfig) -> Result<(World, System, Vec<PretrainReport>)> {
    config.validate()?;
    let world = generate_world(&config.world, config.seed)?;
    let mut system = build_system(config)?;
    let pretrain = pretrain_all(&mut system, &world, &config.pretrain)?;
    Ok((world, system, pretrain))
}

fn classifier_accuracies(system: &System, world: &World, split: Split) -> Result<BTreeMap<String, f64>> {
    system
        .channels
        .iter()
        .map(|c| Ok((c.name().to_string(), clean_accuracy(system, c.name(), world.split(split))?)))
        .collect()
}

/// Both evaluation modes that apply to the system.
pub fn evaluate_split(
    config: &ExperimentConfig,
    system: &System,
    world: &World,
    split: Split,
) -> Result<MetricReport> {
    let items = split_items(config, system, world, split)?;
    let records = world.split(split);
    let path = config.tokenization.path;
    let (scored, _) = evaluate(system, &items, records, path, EvalMode::ScoreCandidates, &config.eval)?;
    if system.head.is_some() {
        return Ok(scored);
    }
    let (generated, _) = evaluate(system, &items, records, path, EvalMode::Generate, &config.eval)?;
    Ok(generated.merge(&scored))
}

/// World, pretraining, training and evaluation on `split`.
pub fn run(config: &ExperimentConfig, split: Split) -> Result<RunOutcome> {
    let (world, mut system, pretrain) = prepare(config)?;
    let classifier_before = classifier_accuracies(&system, &world, split)?;
    let items = split_items(config, &system, &world, Split::Train)?;
    let mut trainer = Trainer::new(&system, config.train_config(), config.tokenization.path)?;
    let train = trainer.train(&mut system, &items)?;
    let metrics = evaluate_split(config, &system, &world, split)?;
    let classifier_after = classifier_accuracies(&system, &world, split)?;
    let input_len = system.input_len(&items[0].qa_example(&items[0].question));
    Ok(RunOutcome {
        system,
        pretrain,
        classifier_before,
        classifier_after,
        train,
        metrics,
        input_len,
    })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub modalities: Vec<String>,
    pub path: TokenizationPath,
    pub regime: Regime,
    pub fraction: f64,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        let m = if self.modalities.is_empty() {
            "text-only".to_string()
        } else {
            self.modalities.join("+")
        };
        format!("{m}/{}/{}/{}", self.path.as_str(), self.regime.as_str(), self.fraction)
    }

    /// The base config with exactly this cell's fields replaced.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.tokenization.modalities = Some(self.modalities.clone());
        c.tokenization.path = self.path;
        c.train.regime = self.regime;
        c.train.data_fraction = self.fraction;
        c.seed = self.seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub input_len: usize,
    pub metrics: MetricReport,
    pub classifier_before: BTreeMap<String, f64>,
    pub classifier_after: BTreeMap<String, f64>,
}

pub const RESULT_HEADER_PREFIX: &str = "modalities\tpath\tregime\tfraction\tseed\tinput_len";

impl CellResult {
    pub fn tsv_row(&self) -> String {
        let m = if self.cell.modalities.is_empty() {
            "-".to_string()
        } else {
            self.cell.modalities.join("+")
        };
        let acc = |m: &BTreeMap<String, f64>| {
            if m.is_empty() {
                "-".to_string()
            } else {
                m.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(",")
            }
        };
        format!(
            "{m}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.cell.path.as_str(),
            self.cell.regime.as_str(),
            self.cell.fraction,
            self.cell.seed,
            self.input_len,
            self.metrics.tsv_row(),
            acc(&self.classifier_before),
            acc(&self.classifier_after)
        )
    }
}

pub fn results_header() -> String {
    format!("{RESULT_HEADER_PREFIX}\t{}\tclassifier_before\tclassifier_after", MetricReport::HEADER)
}

/// Cross product of the grid, in a fixed order.
pub fn ablation_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let grid = &config.ablate;
    let sets = if grid.modality_sets.is_empty() {
        vec![config.active_modalities()]
    } else {
        grid.modality_sets.clone()
    };
    let mut cells = Vec::new();
    for m in &sets {
        for &path in &grid.paths {
            for &regime in &grid.regimes {
                for &fraction in &grid.fractions {
                    for &seed in &grid.seeds {
                        cells.push(Cell {
                            modalities: m.clone(),
                            path,
                            regime,
                            fraction,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

pub fn run_cell(base: &ExperimentConfig, cell: &Cell, split: Split) -> Result<CellResult> {
    let out = run(&cell.apply(base), split)?;
    Ok(CellResult {
        cell: cell.clone(),
        input_len: out.input_len,
        metrics: out.metrics,
        classifier_before: out.classifier_before,
        classifier_after: out.classifier_after,
    })
}

/// Runs cells on up to `parallelism` threads. Results come back in cell order;
/// `on_done` sees each as it finishes, so partial tables survive interruption.
pub fn run_cells(
    base: &ExperimentConfig,
    cells: &[Cell],
    split: Split,
    parallelism: usize,
    on_done: &(dyn Fn(&CellResult) + Sync),
) -> Result<Vec<CellResult>> {
    let workers = parallelism.max(1).min(cells.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<CellResult>>>> =
        cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(base, &cells[i], split);
                if let Ok(res) = &r {
                    on_done(res);
                }
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell ran"))
        .collect()
}

/// Mean of a metric over results matching `filter`.
pub fn mean_metric(
    results: &[CellResult],
    filter: impl Fn(&Cell) -> bool,
    metric: impl Fn(&MetricReport) -> f64,
) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| filter(&r.cell)).map(|r| metric(&r.metrics)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row of a K sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stage: usize,
    pub k_first: usize,
    pub k_second: Option<usize>,
    pub modalities: Vec<String>,
    pub metrics: MetricReport,
}

/// Two-stage K tuning: sweep the first channel's K with the second channel
/// excluded, fix the best (by exact match on `split`, lowest K on ties), then
/// sweep the second channel's K with both present.
pub fn sweep_k(base: &ExperimentConfig, split: Split) -> Result<Vec<SweepRow>> {
    let grid = &base.sweep;
    if grid.first_k.is_empty() || grid.second_k.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let all = base.active_modalities();
    for n in [&grid.first, &grid.second] {
        if !all.contains(n) {
            return Err(Error::Config(format!("sweep channel `{n}` is not active")));
        }
    }
    let stage1_mods: Vec<String> = all.iter().filter(|m| **m != grid.second).cloned().collect();
    let mut rows = Vec::new();
    for &k in &grid.first_k {
        let mut c = base.clone();
        c.tokenization.modalities = Some(stage1_mods.clone());
        c.tokenization.channels.entry(grid.first.clone()).or_default().k = Some(k);
        let out = run(&c, split)?;
        rows.push(SweepRow {
            stage: 1,
            k_first: k,
            k_second: None,
            modalities: stage1_mods.clone(),
            metrics: out.metrics,
        });
    }
    let mut best = &rows[0];
    for r in &rows {
        if r.metrics.exact_match > best.metrics.exact_match {
            best = r;
        }
    }
    let best_k = best.k_first;
    for &k in &grid.second_k {
        let mut c = base.clone();
        c.tokenization.modalities = Some(all.clone());
        c.tokenization.channels.entry(grid.first.clone()).or_default().k = Some(best_k);
        c.tokenization.channels.entry(grid.second.clone()).or_default().k = Some(k);
        let out = run(&c, split)?;
        rows.push(SweepRow {
            stage: 2,
            k_first: best_k,
            k_second: Some(k),
            modalities: all.clone(),
            metrics: out.metrics,
        });
    }
    Ok(rows)
}
