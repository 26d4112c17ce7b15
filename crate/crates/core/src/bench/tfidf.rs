//! Which generated words go with which sampled category.
//!
//! Every category gets one document: the concatenation of the filtered
//! generated text of all examples in which it was sampled. A word scores
//! `tf · idf` with `tf` its relative frequency in that document and
//! `idf = ln(M / df)` over the `M` non-empty category documents.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

const STOPWORDS: &str = include_str!("../../data/stopwords.txt");

pub fn stopwords() -> HashSet<&'static str> {
    STOPWORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// One generated text with its context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDoc {
    pub text: String,
    /// Words of the input transcript; removed from `text` before counting.
    #[serde(default)]
    pub transcript: String,
    /// `(channel, category)` pairs sampled for this example.
    pub sampled: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryWords {
    pub channel: String,
    pub category: usize,
    pub documents: usize,
    /// Highest score first; ties by word.
    pub words: Vec<(String, f64)>,
}

impl CategoryWords {
    /// Set when the category was never sampled.
    pub fn never_sampled(&self) -> bool {
        self.documents == 0
    }
}

/// Words of `doc` left after stop-word and transcript filtering.
pub fn filtered_words(doc: &GeneratedDoc, stop: &HashSet<&str>) -> Vec<String> {
    let transcript: HashSet<&str> = doc.transcript.split_whitespace().collect();
    doc.text
        .split_whitespace()
        .filter(|w| !stop.contains(w) && !transcript.contains(w))
        .map(str::to_string)
        .collect()
}

/// Ranked word lists for every `(channel, category)` in `categories`, top `k` each.
pub fn tfidf_correlation(
    docs: &[GeneratedDoc],
    categories: &[(String, usize)],
    k: usize,
) -> Vec<CategoryWords> {
    let stop = stopwords();
    let mut per_cat: BTreeMap<(String, usize), (usize, Vec<String>)> = categories
        .iter()
        .map(|c| (c.clone(), (0, Vec::new())))
        .collect();
    for doc in docs {
        let words = filtered_words(doc, &stop);
        let unique: BTreeSet<&(String, usize)> = doc.sampled.iter().collect();
        for key in unique {
            if let Some(entry) = per_cat.get_mut(key) {
                entry.0 += 1;
                entry.1.extend(words.iter().cloned());
            }
        }
    }
    let nonempty = per_cat.values().filter(|(_, w)| !w.is_empty()).count();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, words) in per_cat.values() {
        let set: BTreeSet<&str> = words.iter().map(String::as_str).collect();
        for w in set {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    categories
        .iter()
        .map(|key| {
            let (documents, words) = &per_cat[key];
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for w in words {
                *counts.entry(w).or_insert(0) += 1;
            }
            let mut scored: Vec<(String, f64)> = counts
                .into_iter()
                .map(|(w, c)| {
                    let tf = c as f64 / words.len() as f64;
                    let idf = (nonempty as f64 / df[w] as f64).ln();
                    (w.to_string(), tf * idf)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(k);
            CategoryWords {
                channel: key.0.clone(),
                category: key.1,
                documents: *documents,
                words: scored,
            }
        })
        .collect()
}
