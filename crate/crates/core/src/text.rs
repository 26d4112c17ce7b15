//! Closed-vocabulary whitespace tokenizer with reserved control tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;

/// Task selector placed at the head of every encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Answer,
    Question,
    Caption,
    Dialog,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Answer, Task::Question, Task::Caption, Task::Dialog];

    pub fn token_id(self) -> usize {
        match self {
            Task::Answer => 3,
            Task::Question => 4,
            Task::Caption => 5,
            Task::Dialog => 6,
        }
    }
}

const RESERVED: [&str; 7] = [
    "<pad>", "<eos>", "<sep>", "<answer>", "<question>", "<caption>", "<dialog>",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextTokenizer {
    /// Builds the vocabulary from every whitespace-separated word in `corpus`.
    /// Words are sorted so the id assignment does not depend on corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for text in corpus {
            for w in text.split_whitespace() {
                if RESERVED.contains(&w) {
                    return Err(Error::Dataset(format!("corpus contains reserved token `{w}`")));
                }
                seen.insert(w.to_string());
            }
        }
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(seen)
            .collect();
        Ok(Self::from_words(words))
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        TextTokenizer { words, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.index.get(w) {
                Some(&id) if !Self::is_reserved(id) => Ok(id),
                _ => Err(Error::UnknownToken(w.to_string())),
            })
            .collect()
    }

    /// Tokenizes and pads or truncates to exactly `len` ids.
    pub fn tokenize_padded(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let mut ids = self.tokenize(text)?;
        ids.resize(len, PAD);
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Detokenizes generated text, stopping at the first EOS.
    pub fn detokenize_generated(&self, ids: &[usize]) -> String {
        let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
        self.detokenize(&ids[..end])
    }
}
