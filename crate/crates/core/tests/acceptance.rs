//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! This target is a report, not a gate: it exits 0 whenever every check ran,
//! so a criterion that is not met shows up as FAIL with its numbers instead
//! of aborting the remaining checks. The assertions that gate the build live
//! in the other integration tests.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::fd::{cases, end_to_end, fd_check};
use common::oracles::{
    bleu_cases, brute_tfidf, empirical, exhaustive, ordered_tuples, plackett_luce, random_system,
    rouge_cases, scorer_for, tfidf_toy,
};
use rand::Rng;
use tokfuse_core::bench::metrics::{bleu_n, rouge_l};
use tokfuse_core::bench::tfidf::tfidf_correlation;
use tokfuse_core::bench::Split;
use tokfuse_core::checkpoint::{self, CheckpointMeta};
use tokfuse_core::decoding::{beam_search, greedy_decode, score_candidates, CandidatePlacement, EncodedScorer, StepScorer};
use tokfuse_core::experiment::{run, run_cells, Cell, CellResult, ExperimentConfig};
use tokfuse_core::model::{with_eos, System};
use tokfuse_core::rng::rng_for;
use tokfuse_core::tensor::{Scope, Tape, Tensor};
use tokfuse_core::tokenization::{
    gumbel_noise, perturb_topk, soft_surrogate, straight_through_embed, Sampling, TokenizationPath,
};
use tokfuse_core::training::{Regime, TrainConfig, TrainItem, Trainer};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, start: Instant, limit_s: Option<f64>, out: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let in_time = limit_s.map_or(true, |l| secs <= l);
    let pass = out.pass && in_time;
    let limit = limit_s.map_or(String::new(), |l| format!(", limit {l:.0} s"));
    println!(
        "{} {id:>2} {name}: {} ({secs:.1} s{limit})",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn gradients() -> Outcome {
    let mut worst_op: f64 = 0.0;
    let mut n = 0;
    for seed in 0..3 {
        for case in cases(seed) {
            worst_op = worst_op.max(fd_check(&case.inputs, case.f.as_ref()));
            n += 1;
        }
    }
    let mut worst_e2e: f64 = 0.0;
    for path in TokenizationPath::ALL {
        for seed in 0..3 {
            worst_e2e = worst_e2e.max(end_to_end(path, seed).0);
            n += 1;
        }
    }
    Outcome {
        pass: worst_op <= 1e-5 && worst_e2e <= 1e-4 && n >= 50,
        detail: format!("{n} cases, per-op max rel err {worst_op:.1e} (≤ 1e-5), end-to-end {worst_e2e:.1e} (≤ 1e-4)"),
    }
}

fn sampling_law() -> Outcome {
    let mut rng = rng_for(5, &[]);
    let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let cases: Vec<(Vec<f64>, usize)> = vec![
        (vec![0.5, 0.3, 0.2], 2),
        (vec![0.1, 0.2, 0.3, 0.4], 3),
        (vec![0.6, 0.0, 0.25, 0.15], 2),
        (vec![0.7, 0.1, 0.1, 0.05, 0.05], 1),
        (raw.iter().map(|v| v / total).collect(), 3),
    ];
    let mut worst: f64 = 0.0;
    for (i, (p, k)) in cases.iter().enumerate() {
        let emp = empirical(p, *k, 200_000, 100 + i as u64);
        let tv = 0.5
            * ordered_tuples(p.len(), *k)
                .iter()
                .map(|t| (emp.get(t).copied().unwrap_or(0.0) - plackett_luce(p, t)).abs())
                .sum::<f64>();
        worst = worst.max(tv);
    }
    Outcome {
        pass: worst <= 0.02,
        detail: format!("{} distributions at 2e5 draws, max TV {worst:.4} (≤ 0.02)", cases.len()),
    }
}

fn straight_through() -> Outcome {
    let mut forward_ok = true;
    let mut backward_ok = true;
    let mut frozen_ok = true;
    for seed in 0..5 {
        let system = common::tiny_system(seed, common::tiny_model(), None);
        let feats = common::features(seed);
        for ch in &system.channels {
            let noise = gumbel_noise(ch.num_categories(), &mut rng_for(seed, &[8]));
            let n = ch.k() * ch.name_len() * ch.embed_dim;
            let weights = Tensor::new(
                vec![ch.k() * ch.name_len(), ch.embed_dim],
                (0..n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect(),
            )
            .unwrap();
            let grads = |straight: bool| {
                let tape = Tape::new();
                let scope = Scope::new(&tape, &system.store);
                let probs = ch.probabilities(&scope, &feats[ch.name()]).unwrap();
                let sampled = perturb_topk(&probs.data(), ch.k(), Some(&noise)).unwrap();
                let t = ch.config.temperature;
                let out = if straight {
                    straight_through_embed(&scope, ch, probs, &sampled, &noise, t, None).unwrap()
                } else {
                    soft_surrogate(&scope, ch, probs, &noise, t).unwrap()
                };
                let value = out.value();
                let loss = out.mul(scope.constant(weights.clone())).unwrap().sum();
                let g = tape.backward(loss).unwrap();
                let ids = [ch.classifier_w, ch.classifier_b, ch.embedding];
                let gs: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| g.param(id).map(<[f64]>::to_vec)).collect();
                (value, sampled, gs)
            };
            let (value, sampled, st) = grads(true);
            let (_, _, soft) = grads(false);
            let table = system.store.get(ch.embedding).value();
            let row = ch.name_len() * ch.embed_dim;
            let hard: Vec<f64> = sampled
                .indices
                .iter()
                .flat_map(|&c| table[c * row..(c + 1) * row].to_vec())
                .collect();
            forward_ok &= value.data() == hard.as_slice();
            backward_ok &= st == soft && st.iter().all(Option::is_some);
        }
        let ex = common::example(&system, seed, "blue cup", true);
        let tape = Tape::new();
        let scope = Scope::new(&tape, &system.store);
        let loss = system
            .sequence_loss(&scope, &ex, TokenizationPath::Frozen, Sampling::Gumbel { seed })
            .unwrap();
        let g = tape.backward(loss).unwrap();
        for ch in &system.channels {
            for id in [ch.classifier_w, ch.classifier_b] {
                frozen_ok &= g.param(id).map_or(true, |s| s.iter().all(|&v| v == 0.0));
            }
        }
    }
    Outcome {
        pass: forward_ok && backward_ok && frozen_ok,
        detail: format!(
            "forward = hard gather: {forward_ok}, backward = soft gradient: {backward_ok}, frozen classifier gradient 0: {frozen_ok}"
        ),
    }
}

fn overfit_one(answer: &str) -> (System, TrainItem) {
    let mut system = random_system(42);
    let t = &system.tokenizer;
    let item = TrainItem {
        id: 0,
        modalities: common::features(3),
        question: t.tokenize(common::QUESTION).unwrap(),
        answer: t.tokenize(answer).unwrap(),
        candidates: common::VIDEO.iter().map(|c| t.tokenize(c).unwrap()).collect(),
        candidates_in_input: true,
        gold_index: common::VIDEO.iter().position(|c| *c == answer),
    };
    let config = TrainConfig {
        epochs: 300,
        batch_size: 1,
        lr: 1e-2,
        milestones: Vec::new(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&system, config, TokenizationPath::Differentiable).unwrap();
    trainer.train(&mut system, std::slice::from_ref(&item)).unwrap();
    (system, item)
}

fn decoder_oracles() -> Outcome {
    let max_len = 3;
    let mut exact = 0;
    let mut greedy_same = 0;
    for seed in 0..20 {
        let system = random_system(seed);
        let scorer = scorer_for(&system, seed);
        let width = scorer.vocab_size().pow(max_len as u32);
        let (best, _) = exhaustive(&scorer, max_len, true);
        exact += (beam_search(&scorer, width, max_len, true).unwrap().tokens == best) as usize;
        greedy_same += (beam_search(&scorer, 1, 8, true).unwrap() == greedy_decode(&scorer, 8).unwrap()) as usize;
    }
    let mut overfit_ok = 0;
    for answer in ["green hat", "old car"] {
        let (system, item) = overfit_one(answer);
        let ex = item.qa_example(&item.question);
        let scorer = EncodedScorer::new(&system, &ex, TokenizationPath::Differentiable).unwrap();
        let reproduced = greedy_decode(&scorer, 8).unwrap().tokens == with_eos(&item.answer);
        let (j, _) = score_candidates(
            &system,
            &ex,
            &item.candidates,
            TokenizationPath::Differentiable,
            CandidatePlacement::InInput,
        )
        .unwrap();
        overfit_ok += (reproduced && Some(j) == item.gold_index) as usize;
    }
    Outcome {
        pass: exact == 20 && greedy_same == 20 && overfit_ok == 2,
        detail: format!(
            "wide beam = exhaustive {exact}/20, width 1 = greedy {greedy_same}/20, overfit reproduce + select gold {overfit_ok}/2"
        ),
    }
}

fn metric_oracles() -> Outcome {
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let bleu = bleu_cases();
    let bleu_ok = bleu.iter().filter(|(c, r, n, e)| (bleu_n(&w(c), &w(r), *n) - e).abs() <= 1e-9).count();
    let rouge = rouge_cases();
    let rouge_ok = rouge.iter().filter(|(c, r, b, e)| (rouge_l(&w(c), &w(r), *b) - e).abs() <= 1e-9).count();
    let (docs, cats) = tfidf_toy();
    let ranked = tfidf_correlation(&docs, &cats, 100);
    let mut tfidf_ok = true;
    for (cw, key) in ranked.iter().zip(&cats) {
        let expect = brute_tfidf(&docs, key, &cats);
        tfidf_ok &= cw.words.len() == expect.len()
            && cw.words.iter().all(|(word, s)| (s - expect[word]).abs() <= 1e-12);
    }
    Outcome {
        pass: bleu_ok == bleu.len() && bleu.len() >= 5 && rouge_ok == rouge.len() && rouge.len() >= 5 && tfidf_ok,
        detail: format!(
            "BLEU {bleu_ok}/{}, ROUGE-L {rouge_ok}/{} within 1e-9, TF.IDF brute force on 5 documents: {tfidf_ok}",
            bleu.len(),
            rouge.len()
        ),
    }
}

/// Default world (ρ = 0.3, 2000/500/500) with a reduced training budget.
fn trend_base() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (name, k) in [("video", 3), ("audio", 2)] {
        c.tokenization.channels.entry(name.into()).or_default().k = Some(k);
    }
    c.train.epochs = 3;
    c.eval.beam_width = 1;
    c
}

fn cells(mods: &[&[&str]], paths: &[TokenizationPath], regime: Regime, fraction: f64) -> Vec<Cell> {
    let mut out = Vec::new();
    for m in mods {
        for &path in paths {
            for &seed in &SEEDS {
                out.push(Cell {
                    modalities: m.iter().map(|s| s.to_string()).collect(),
                    path,
                    regime,
                    fraction,
                    seed,
                });
            }
        }
    }
    out
}

fn run_grid(base: &ExperimentConfig, cells: &[Cell]) -> Vec<CellResult> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    run_cells(base, cells, Split::Test, workers, &|_| {}).unwrap()
}

fn per_seed(results: &[CellResult], pick: impl Fn(&Cell) -> bool, metric: impl Fn(&CellResult) -> f64) -> BTreeMap<u64, f64> {
    results.iter().filter(|r| pick(&r.cell)).map(|r| (r.cell.seed, metric(r))).collect()
}

fn mean(v: &BTreeMap<u64, f64>) -> f64 {
    v.values().sum::<f64>() / v.len() as f64
}

fn trend_a(results: &[CellResult]) -> Outcome {
    let em = |p: TokenizationPath| mean(&per_seed(results, |c| c.path == p, |r| r.metrics.exact_match));
    let d = em(TokenizationPath::Differentiable);
    let f = em(TokenizationPath::Frozen);
    let e = em(TokenizationPath::FeatureEmbed);
    let margin = 100.0 * (d - f);
    Outcome {
        pass: d > f && f > e && margin >= 3.0,
        detail: format!(
            "mean exact match differentiable {d:.4}, frozen {f:.4}, feature-embed {e:.4}; \
             differentiable > frozen: {}, frozen > feature-embed: {}, margin {margin:.1} points (≥ 3)",
            d > f,
            f > e
        ),
    }
}

fn trend_b(with_both: &[CellResult], subsets: &[CellResult]) -> Outcome {
    let em = |rs: &[CellResult], mods: &[&str]| {
        per_seed(rs, |c| c.modalities.iter().map(String::as_str).eq(mods.iter().copied()), |r| r.metrics.exact_match)
    };
    let text = em(subsets, &[]);
    let video = em(subsets, &["video"]);
    let audio = em(subsets, &["audio"]);
    let both = per_seed(with_both, |c| c.path == TokenizationPath::Differentiable, |r| r.metrics.exact_match);
    let wins = |m: &BTreeMap<u64, f64>| SEEDS.iter().filter(|s| m[s] > text[s]).count();
    let (wv, wa, wb) = (wins(&video), wins(&audio), wins(&both));
    Outcome {
        pass: wv >= 4 && wa >= 4 && wb >= 4,
        detail: format!(
            "seeds beating text-only ({:.3}): video {wv}/5 ({:.3}), audio {wa}/5 ({:.3}), video+audio {wb}/5 ({:.3})",
            mean(&text),
            mean(&video),
            mean(&audio),
            mean(&both)
        ),
    }
}

fn trend_c(results: &[CellResult]) -> Outcome {
    let top1 = |g: Regime| per_seed(results, |c| c.regime == g, |r| r.metrics.top1);
    let qa = top1(Regime::Qa);
    let cycle = top1(Regime::Cycle);
    let disc = top1(Regime::Discriminative);
    let gen_wins = SEEDS.iter().filter(|s| qa[s] > disc[s]).count();
    let cycle_wins = SEEDS.iter().filter(|s| cycle[s] >= qa[s]).count();
    Outcome {
        pass: gen_wins >= 4 && cycle_wins >= 4,
        detail: format!(
            "fraction 0.1 top-1: qa {:.3}, cycle {:.3}, discriminative {:.3}; generative > discriminative {gen_wins}/5, cycle ≥ qa {cycle_wins}/5",
            mean(&qa),
            mean(&cycle),
            mean(&disc)
        ),
    }
}

fn reproducibility() -> Outcome {
    let mut c = common::small_experiment(6);
    c.world.train_size = 120;
    c.world.val_size = 40;
    c.train.epochs = 2;
    let bytes = |c: &ExperimentConfig| {
        let out = run(c, Split::Val).unwrap();
        let meta = CheckpointMeta::new(&out.system, c.seed, c.hash());
        (checkpoint::to_bytes(&out.system, &meta).unwrap(), out.metrics)
    };
    let mut same = true;
    for regime in [Regime::Qa, Regime::Cycle] {
        c.train.regime = regime;
        let first = bytes(&c);
        let snapshot = ExperimentConfig::from_toml_with_overrides(&c.to_toml().unwrap(), &[]).unwrap();
        same &= first == bytes(&snapshot);
    }
    Outcome {
        pass: same,
        detail: format!("re-run from config snapshot gives identical checkpoint bytes and metrics: {same}"),
    }
}

fn schedule_and_degeneracies() -> Outcome {
    let c = TrainConfig {
        epochs: 8,
        lr: 0.02,
        ..TrainConfig::default()
    };
    let expected = [0.02, 0.02, 0.02, 0.02, 0.02 / 10.0, 0.02 / 10.0, 0.02 / 100.0, 0.02 / 100.0];
    let schedule_ok = (0..8).all(|e| (c.lr_at(e) - expected[e]).abs() <= 1e-18);

    let train = |config: TrainConfig| {
        let mut system = common::tiny_system(11, common::tiny_model(), None);
        let t = system.tokenizer.clone();
        let items: Vec<TrainItem> = (0..4)
            .map(|i| TrainItem {
                id: i,
                modalities: common::features(100 + i as u64),
                question: t.tokenize(common::QUESTION).unwrap(),
                answer: t.tokenize(common::VIDEO[i]).unwrap(),
                candidates: Vec::new(),
                candidates_in_input: false,
                gold_index: None,
            })
            .collect();
        let mut trainer = Trainer::new(&system, config, TokenizationPath::Differentiable).unwrap();
        let report = trainer.train(&mut system, &items).unwrap();
        let meta = CheckpointMeta::new(&system, 0, "");
        (checkpoint::to_bytes(&system, &meta).unwrap(), report)
    };
    let base = |regime| TrainConfig {
        regime,
        epochs: 3,
        batch_size: 2,
        lr: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let qa = train(base(Regime::Qa));
    let qaqg_off = train(TrainConfig {
        question_generation: false,
        ..base(Regime::QaQg)
    });
    let qaqg = train(base(Regime::QaQg));
    let cycle_off = train(TrainConfig {
        cycle_branches: false,
        ..base(Regime::Cycle)
    });
    let a = qa == qaqg_off;
    let b = qaqg == cycle_off;
    Outcome {
        pass: schedule_ok && a && b,
        detail: format!(
            "lr, lr/10, lr/100 segments exact: {schedule_ok}; qa+qg without QG = qa: {a}; cycle without branches = qa+qg: {b}"
        ),
    }
}

fn main() {
    // Optional criterion numbers select a subset, e.g. `cargo test --test acceptance -- 1 5`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    println!("acceptance report");
    let mut passed = 0;
    let mut total = 0;
    let mut check = |id: usize, name: &str, limit_s: Option<f64>, f: &dyn Fn() -> Outcome| {
        if want(id) {
            let t = Instant::now();
            passed += report(id, name, t, limit_s, f()) as usize;
            total += 1;
        }
    };

    check(1, "gradient correctness", Some(120.0), &gradients);
    check(2, "sampling law", Some(60.0), &sampling_law);
    check(3, "straight-through contract", None, &straight_through);
    check(4, "decoder oracles", None, &decoder_oracles);
    check(5, "metric oracles", None, &metric_oracles);

    let base = trend_base();
    let all = [TokenizationPath::Differentiable, TokenizationPath::Frozen, TokenizationPath::FeatureEmbed];
    let a_cells = cells(&[&["video", "audio"]], &all, Regime::Qa, 1.0);
    // Trend B reuses the differentiable video+audio runs of trend A.
    let a_results = std::cell::OnceCell::new();
    let a_grid = || a_results.get_or_init(|| run_grid(&base, &a_cells));
    check(6, "ablation trend A (tokenization paths)", Some(1800.0), &|| trend_a(a_grid()));
    check(7, "ablation trend B (modalities)", None, &|| {
        let subsets = cells(&[&[], &["video"], &["audio"]], &[TokenizationPath::Differentiable], Regime::Qa, 1.0);
        trend_b(a_grid(), &run_grid(&base, &subsets))
    });
    check(8, "ablation trend C (regimes at fraction 0.1)", None, &|| {
        let mut c_base = base.clone();
        c_base.train.epochs = 10;
        let mut c_cells = Vec::new();
        for regime in [Regime::Qa, Regime::Cycle, Regime::Discriminative] {
            c_cells.extend(cells(&[&["video", "audio"]], &[TokenizationPath::Differentiable], regime, 0.1));
        }
        trend_c(&run_grid(&c_base, &c_cells))
    });
    check(9, "reproducibility", None, &reproducibility);
    check(10, "schedule and regime degeneracies", None, &schedule_and_degeneracies);

    println!("{passed}/{total} criteria pass");
}
