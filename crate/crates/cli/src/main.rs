use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tokfuse_core::bench::{
    evaluate, generate_world, records_to_jsonl, tfidf::tfidf_correlation, tfidf::GeneratedDoc,
    EvalMode, MetricReport, Split,
};
use tokfuse_core::checkpoint::{self, CheckpointMeta};
use tokfuse_core::experiment::{
    ablation_cells, build_system, mean_metric, pretrain_all, results_header, run_cells,
    split_items, sweep_k, ExperimentConfig,
};
use tokfuse_core::model::System;
use tokfuse_core::training::Trainer;
use tokfuse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tokfuse", version, about = "Differentiable multimodal tokenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Checkpoint to start from or evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for sweeps and ablations.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset split used for evaluation.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write the splits as JSON lines.
    GenData(Common),
    /// Pretrain the modality classifiers on (possibly corrupted) labels.
    Pretrain(Common),
    /// Train under the configured regime and tokenization path.
    Train(Common),
    /// Evaluate a checkpoint and write a metric report.
    Eval(Common),
    /// Generate answers: one `id<TAB>text` line per example.
    Generate(Common),
    /// Score candidates: one `id<TAB>j*<TAB>l_0<TAB>...` line per example.
    Score(Common),
    /// Two-stage K sweep.
    SweepK(Common),
    /// Run the ablation grid.
    Ablate(Common),
    /// Rank generated words per sampled category by TF.IDF.
    AnalyzeTfidf(Common),
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Ctx {
    common: Common,
    config: ExperimentConfig,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let config = ExperimentConfig::load(common.config.as_deref(), &common.overrides, common.seed)?;
        fs::create_dir_all(&common.out_dir).map_err(|e| Error::io(&common.out_dir, e))?;
        Ok(Ctx { common, config })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.common.out_dir.join(name)
    }

    fn snapshot(&self) -> Result<()> {
        write(&self.out("config.toml"), &self.config.to_toml()?)
    }

    fn meta(&self, system: &System) -> CheckpointMeta {
        CheckpointMeta::new(system, self.config.seed, self.config.hash())
    }

    fn split(&self) -> Split {
        self.common.split.into()
    }

    /// System restored from `--checkpoint`, which must exist.
    fn load(&self) -> Result<System> {
        let path = self
            .common
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Argument("--checkpoint is required".into()))?;
        let mut system = build_system(&self.config)?;
        checkpoint::load(path, &mut system, Some(&self.config.hash()))?;
        Ok(system)
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    for split in Split::ALL {
        write(
            &ctx.out(&format!("{}.jsonl", split.as_str())),
            &records_to_jsonl(world.split(split))?,
        )?;
    }
    let latents = serde_json::json!({
        "schema_version": world.schema_version,
        "seed": world.seed,
        "latents": world.latents,
    });
    write(&ctx.out("world.json"), &serde_json::to_string_pretty(&latents).unwrap())?;
    ctx.snapshot()?;
    println!(
        "wrote {} / {} / {} examples to {}",
        world.train.len(),
        world.val.len(),
        world.test.len(),
        ctx.common.out_dir.display()
    );
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    let mut system = build_system(&ctx.config)?;
    let reports = pretrain_all(&mut system, &world, &ctx.config.pretrain)?;
    let mut table = String::from("channel\tfinal_loss\tfit_accuracy\tclean_accuracy\n");
    for r in &reports {
        let clean = tokfuse_core::bench::clean_accuracy(&system, &r.channel, world.split(ctx.split()))?;
        table.push_str(&format!("{}\t{:.6}\t{:.4}\t{:.4}\n", r.channel, r.final_loss, r.fit_accuracy, clean));
    }
    write(&ctx.out("pretrain.tsv"), &table)?;
    checkpoint::save(&ctx.out("pretrained.ckpt"), &system, &ctx.meta(&system))?;
    ctx.snapshot()?;
    print!("{table}");
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    let mut system = match &ctx.common.checkpoint {
        Some(_) => ctx.load()?,
        None => {
            let mut s = build_system(&ctx.config)?;
            pretrain_all(&mut s, &world, &ctx.config.pretrain)?;
            s
        }
    };
    ctx.snapshot()?;
    let items = split_items(&ctx.config, &system, &world, Split::Train)?;
    let mut trainer = Trainer::new(&system, ctx.config.train_config(), ctx.config.tokenization.path)?;
    let report = match trainer.train(&mut system, &items) {
        Ok(r) => r,
        Err(e @ (Error::Divergence { .. } | Error::NanGradient { .. })) => {
            // The failing step was not applied, so the store holds the last good state.
            let path = ctx.out("last-good.ckpt");
            checkpoint::save(&path, &system, &ctx.meta(&system))?;
            log::error!("saved last good parameters to {}", path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write(&ctx.out("metrics.tsv"), &report.step_table())?;
    let mut epochs = String::from("epoch\tlr\tmean_loss\tskipped\n");
    for e in &report.epochs {
        epochs.push_str(&format!("{}\t{:e}\t{:.6}\t{}\n", e.epoch + 1, e.lr, e.mean_loss, e.skipped));
    }
    write(&ctx.out("epochs.tsv"), &epochs)?;
    checkpoint::save(&ctx.out("checkpoint.ckpt"), &system, &ctx.meta(&system))?;
    let metrics = tokfuse_core::experiment::evaluate_split(&ctx.config, &system, &world, ctx.split())?;
    let table = format!("{}\n{}\n", MetricReport::HEADER, metrics.tsv_row());
    write(&ctx.out("report.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    let system = ctx.load()?;
    let metrics = tokfuse_core::experiment::evaluate_split(&ctx.config, &system, &world, ctx.split())?;
    let table = format!("{}\n{}\n", MetricReport::HEADER, metrics.tsv_row());
    write(&ctx.out(&format!("eval-{}.tsv", ctx.split().as_str())), &table)?;
    print!("{table}");
    Ok(())
}

fn per_example(ctx: &Ctx, mode: EvalMode) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    let system = ctx.load()?;
    let split = ctx.split();
    let items = split_items(&ctx.config, &system, &world, split)?;
    let records = world.split(split);
    let (_, outputs) = evaluate(&system, &items, records, ctx.config.tokenization.path, mode, &ctx.config.eval)?;
    let mut text = String::new();
    for (o, r) in outputs.iter().zip(records) {
        match mode {
            EvalMode::Generate => {
                text.push_str(&format!("{}\t{}\n", r.id, o.generated.as_deref().unwrap_or("")));
            }
            EvalMode::ScoreCandidates => {
                let losses: Vec<String> = o.losses.iter().map(|l| format!("{l:.6}")).collect();
                text.push_str(&format!("{}\t{}\t{}\n", r.id, o.selected.unwrap_or(0), losses.join("\t")));
            }
        }
    }
    let name = match mode {
        EvalMode::Generate => "generate",
        EvalMode::ScoreCandidates => "score",
    };
    write(&ctx.out(&format!("{name}-{}.tsv", split.as_str())), &text)?;
    std::io::stdout().write_all(text.as_bytes()).ok();
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<()> {
    ctx.snapshot()?;
    let rows = sweep_k(&ctx.config, ctx.split())?;
    let g = &ctx.config.sweep;
    let mut table = format!("stage\tk_{}\tk_{}\tmodalities\t{}\n", g.first, g.second, MetricReport::HEADER);
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.stage,
            r.k_first,
            r.k_second.map_or("-".to_string(), |k| k.to_string()),
            r.modalities.join("+"),
            r.metrics.tsv_row()
        ));
    }
    write(&ctx.out("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    ctx.snapshot()?;
    let cells = ablation_cells(&ctx.config);
    let path = ctx.out("results.tsv");
    write(&path, &format!("{}\n", results_header()))?;
    let sink = Mutex::new(());
    let on_done = |r: &tokfuse_core::experiment::CellResult| {
        let _guard = sink.lock().unwrap();
        if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&path) {
            let _ = writeln!(f, "{}", r.tsv_row());
        }
        log::info!("done {} seed {}", r.cell.label(), r.cell.seed);
    };
    let results = run_cells(&ctx.config, &cells, ctx.split(), ctx.common.parallelism, &on_done)?;
    // Rewrite in cell order so the table does not depend on scheduling.
    let mut table = format!("{}\n", results_header());
    for r in &results {
        table.push_str(&r.tsv_row());
        table.push('\n');
    }
    write(&path, &table)?;
    let mut labels: Vec<String> = Vec::new();
    for r in &results {
        if !labels.contains(&r.cell.label()) {
            labels.push(r.cell.label());
        }
    }
    let mut summary = String::from("cell\tseeds\tmean_exact_match\tmean_top1\n");
    for l in &labels {
        let n = results.iter().filter(|r| &r.cell.label() == l).count();
        let em = mean_metric(&results, |c| &c.label() == l, |m| m.exact_match).unwrap_or(0.0);
        let t1 = mean_metric(&results, |c| &c.label() == l, |m| m.top1).unwrap_or(0.0);
        summary.push_str(&format!("{l}\t{n}\t{em:.4}\t{t1:.4}\n"));
    }
    write(&ctx.out("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn analyze_tfidf(ctx: &Ctx) -> Result<()> {
    let world = generate_world(&ctx.config.world, ctx.config.seed)?;
    let system = ctx.load()?;
    let split = ctx.split();
    let items = split_items(&ctx.config, &system, &world, split)?;
    let (_, outputs) = evaluate(
        &system,
        &items,
        world.split(split),
        ctx.config.tokenization.path,
        EvalMode::Generate,
        &ctx.config.eval,
    )?;
    let docs: Vec<GeneratedDoc> = outputs
        .iter()
        .map(|o| GeneratedDoc {
            text: o.generated.clone().unwrap_or_default(),
            transcript: String::new(),
            sampled: o.sampled.clone(),
        })
        .collect();
    let categories: Vec<(String, usize)> = system
        .channels
        .iter()
        .flat_map(|c| (0..c.num_categories()).map(move |i| (c.name().to_string(), i)))
        .collect();
    let ranked = tfidf_correlation(&docs, &categories, 10);
    let mut table = String::from("channel\tcategory\tname\tdocuments\trank\tword\tscore\n");
    for cw in &ranked {
        let name = &system.channel(&cw.channel).unwrap().config.category_names[cw.category];
        if cw.never_sampled() {
            log::warn!("category {}/{name} was never sampled", cw.channel);
            table.push_str(&format!("{}\t{}\t{name}\t0\t-\t-\t-\n", cw.channel, cw.category));
        }
        for (rank, (w, s)) in cw.words.iter().enumerate() {
            table.push_str(&format!(
                "{}\t{}\t{name}\t{}\t{}\t{w}\t{s:.6}\n",
                cw.channel,
                cw.category,
                cw.documents,
                rank + 1
            ));
        }
    }
    write(&ctx.out(&format!("tfidf-{}.tsv", split.as_str())), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (Common, fn(&Ctx) -> Result<()>) = match cli.command {
        Command::GenData(c) => (c, gen_data),
        Command::Pretrain(c) => (c, pretrain),
        Command::Train(c) => (c, train),
        Command::Eval(c) => (c, eval),
        Command::Generate(c) => (c, |ctx| per_example(ctx, EvalMode::Generate)),
        Command::Score(c) => (c, |ctx| per_example(ctx, EvalMode::ScoreCandidates)),
        Command::SweepK(c) => (c, sweep),
        Command::Ablate(c) => (c, ablate),
        Command::AnalyzeTfidf(c) => (c, analyze_tfidf),
    };
    f(&Ctx::new(common)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
