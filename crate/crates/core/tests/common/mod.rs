#![allow(dead_code)]

pub mod fd;
pub mod oracles;

use std::collections::BTreeMap;

use rand::Rng;
use tokfuse_core::model::{with_eos, ModelConfig, MultimodalExample, System};
use tokfuse_core::rng::rng_for;
use tokfuse_core::text::{Task, TextTokenizer};
use tokfuse_core::tokenization::ChannelConfig;

pub const VIDEO: [&str; 5] = ["red ball", "blue cup", "green hat", "tall tree", "old car"];
pub const AUDIO: [&str; 4] = ["dog", "bell ringing", "rain", "loud horn"];
pub const QUESTION: &str = "what is it";

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        model_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 12,
        positional: true,
        tie_output: false,
    }
}

pub fn tokenizer() -> TextTokenizer {
    let mut corpus: Vec<&str> = VIDEO.iter().chain(AUDIO.iter()).copied().collect();
    corpus.push(QUESTION);
    TextTokenizer::build(corpus).unwrap()
}

pub fn channel(name: &str, names: &[&str], k: usize, temperature: f64) -> ChannelConfig {
    ChannelConfig {
        name: name.into(),
        num_categories: names.len(),
        k,
        name_len: 2,
        temperature,
        category_names: names.iter().map(|s| s.to_string()).collect(),
    }
}

pub const FEATURES: usize = 3;

/// Two-channel system with small widths.
pub fn tiny_system(seed: u64, model: ModelConfig, head: Option<usize>) -> System {
    let channels = vec![
        (channel("video", &VIDEO, 2, 1.0), FEATURES),
        (channel("audio", &AUDIO, 1, 0.7), FEATURES),
    ];
    System::new(tokenizer(), model, &channels, head, &mut rng_for(seed, &[7])).unwrap()
}

pub fn features(seed: u64) -> BTreeMap<String, Vec<f64>> {
    let mut rng = rng_for(seed, &[11]);
    let mut m = BTreeMap::new();
    for name in ["video", "audio"] {
        m.insert(
            name.to_string(),
            (0..FEATURES).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        );
    }
    m
}

/// QA example whose answer is `answer`; the candidates are every video name.
pub fn example(system: &System, seed: u64, answer: &str, with_candidates: bool) -> MultimodalExample {
    let t = &system.tokenizer;
    MultimodalExample {
        task: Task::Answer,
        modalities: features(seed),
        texts: vec![t.tokenize(QUESTION).unwrap()],
        candidates: if with_candidates {
            VIDEO.iter().map(|c| t.tokenize(c).unwrap()).collect()
        } else {
            Vec::new()
        },
        gold: with_eos(&t.tokenize(answer).unwrap()),
    }
}

/// Reduced-budget experiment on a smaller default-shaped world.
pub fn small_experiment(seed: u64) -> tokfuse_core::experiment::ExperimentConfig {
    let mut c = tokfuse_core::experiment::ExperimentConfig::default();
    c.seed = seed;
    c.world.train_size = 400;
    c.world.val_size = 100;
    c.world.test_size = 100;
    c.model = ModelConfig {
        embed_dim: 32,
        model_dim: 32,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 64,
        positional: true,
        tie_output: false,
    };
    for (name, k) in [("video", 3), ("audio", 2)] {
        c.tokenization.channels.insert(
            name.into(),
            tokfuse_core::experiment::ChannelSettings {
                k: Some(k),
                temperature: None,
            },
        );
    }
    c.train.epochs = 3;
    c.eval.beam_width = 1;
    c
}
