//! Core library for highlighting medically relevant words in patient-doctor
//! chat transcripts.
//!
//! The toolkit bundles three families of word-level highlighters and the
//! machinery to train, evaluate and present them:
//!
//! * [`tfidf`] — an unsupervised TF-IDF baseline over conversation documents,
//! * [`classify`] + [`lime`] — linear issue-category classifiers whose
//!   per-word attributions come from a LIME surrogate,
//! * [`tagger`] — a bidirectional LSTM token tagger pretrained on a term
//!   lexicon and fine-tuned on gold highlights.
//!
//! [`corpus`] owns preprocessing, reversible tokenization and dataset I/O,
//! [`eval`] the threshold metrics, ranking metrics, agreement and learning
//! curves, [`report`] the HTML rendering and redaction, [`pipeline`] the
//! uniform "score every token of a message" interface shared by all models,
//! and [`synthetic`] a seeded generator for benchmark corpora used by the
//! test-suite and examples.

pub mod classify;
pub mod corpus;
pub mod eval;
pub mod lime;
pub mod math;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod tagger;
pub mod tfidf;
