//! TF-IDF highlighting baseline.
//!
//! Conversations are the documents: the model counts, for every 1- to 3-gram
//! of token norms, how many conversations contain it. A document's score for
//! an n-gram `t` is
//!
//! ```text
//! score(t, d) = f(t, d) * ln(|D| / f(t, D))
//! ```
//!
//! where `f(t, d)` is the occurrence count inside the document and `f(t, D)`
//! the number of documents containing `t`. Scoring a message builds its raw
//! score vector over all its n-grams, L2-normalizes it, and assigns every
//! word the maximum normalized score among the n-grams covering it — so a
//! distinctive phrase lifts each of its words even when the individual words
//! are common.

use crate::corpus::{Conversation, Message};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Words with a normalized score at or above this are highlighted.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TfidfError {
    #[error("cannot fit a TF-IDF model on an empty corpus")]
    EmptyCorpus,
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Document frequencies over a corpus of conversations. N-gram keys are token
/// norms joined by single spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub doc_count: u32,
    pub ngram_range: (usize, usize),
    pub df: BTreeMap<String, u32>,
}

impl TfidfModel {
    /// Fits document frequencies on conversations, each conversation being
    /// the concatenation of all its messages' token norms.
    pub fn fit(conversations: &[Conversation]) -> Result<TfidfModel, TfidfError> {
        let docs: Vec<Vec<String>> = conversations.iter().map(|c| c.all_norms()).collect();
        Self::fit_documents(&docs, (1, 3))
    }

    /// Fits on bare token-norm documents with an explicit n-gram range.
    pub fn fit_documents(
        docs: &[Vec<String>],
        ngram_range: (usize, usize),
    ) -> Result<TfidfModel, TfidfError> {
        if docs.is_empty() {
            return Err(TfidfError::EmptyCorpus);
        }
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        for doc in docs {
            let mut seen = std::collections::BTreeSet::new();
            for_each_ngram(doc, ngram_range, |key| {
                seen.insert(key);
            });
            for key in seen {
                *df.entry(key).or_insert(0) += 1;
            }
        }
        Ok(TfidfModel {
            doc_count: docs.len() as u32,
            ngram_range,
            df,
        })
    }

    /// Raw (unnormalized) score of a space-joined n-gram inside a document;
    /// zero when the n-gram is absent from the document or was never seen at
    /// fit time.
    pub fn score_ngram(&self, ngram: &str, doc: &[String]) -> f64 {
        let df = match self.df.get(ngram) {
            Some(&df) if df > 0 => df,
            _ => return 0.0,
        };
        let parts: Vec<&str> = ngram.split(' ').collect();
        let occurrences = count_occurrences(doc, &parts);
        occurrences as f64 * (self.doc_count as f64 / df as f64).ln()
    }

    /// L2-normalized map of raw scores for every n-gram of the document. A
    /// document whose raw scores are all zero stays a zero vector.
    pub fn document_vector(&self, doc: &[String]) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for_each_ngram(doc, self.ngram_range, |key| {
            *counts.entry(key).or_insert(0) += 1;
        });
        let mut vector: BTreeMap<String, f64> = BTreeMap::new();
        for (key, count) in counts {
            let idf = match self.df.get(&key) {
                Some(&df) if df > 0 => (self.doc_count as f64 / df as f64).ln(),
                _ => 0.0,
            };
            vector.insert(key, count as f64 * idf);
        }
        let norm = vector.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in vector.values_mut() {
                *v /= norm;
            }
        }
        vector
    }

    /// Per-token scores for one message: each token gets the maximum
    /// normalized score among the n-grams covering its position.
    pub fn highlight_scores(&self, message: &Message) -> Vec<f64> {
        let norms: Vec<String> = message.tokens.iter().map(|t| t.norm.clone()).collect();
        self.highlight_scores_tokens(&norms)
    }

    /// Same as [`highlight_scores`](Self::highlight_scores) on bare norms.
    pub fn highlight_scores_tokens(&self, norms: &[String]) -> Vec<f64> {
        let vector = self.document_vector(norms);
        let mut scores = vec![0.0; norms.len()];
        let (lo, hi) = self.ngram_range;
        for n in lo..=hi.min(norms.len()) {
            for start in 0..=(norms.len() - n) {
                let key = norms[start..start + n].join(" ");
                if let Some(&value) = vector.get(&key) {
                    for score in &mut scores[start..start + n] {
                        if value > *score {
                            *score = value;
                        }
                    }
                }
            }
        }
        scores
    }

    pub fn save(&self, path: &Path) -> Result<(), TfidfError> {
        let json = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, json).map_err(|source| TfidfError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<TfidfModel, TfidfError> {
        let text = fs::read_to_string(path).map_err(|source| TfidfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TfidfError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

fn for_each_ngram(doc: &[String], (lo, hi): (usize, usize), mut f: impl FnMut(String)) {
    for n in lo..=hi.min(doc.len()) {
        for start in 0..=(doc.len() - n) {
            f(doc[start..start + n].join(" "));
        }
    }
}

fn count_occurrences(doc: &[String], parts: &[&str]) -> u32 {
    if parts.is_empty() || parts.len() > doc.len() {
        return 0;
    }
    let mut count = 0;
    for start in 0..=(doc.len() - parts.len()) {
        if doc[start..start + parts.len()]
            .iter()
            .zip(parts)
            .all(|(a, b)| a == b)
        {
            count += 1;
        }
    }
    count
}
