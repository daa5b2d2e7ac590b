//! The uniform "one score per token" view over every model family, used by
//! evaluation and the command-line tools.
//!
//! Five benchmark models exist: the TF-IDF baseline, LIME explanations over
//! the logistic and hinge classifiers, and the recurrent tagger in unigram
//! and ngram modes. Each gets a [`Highlighter`] wrapper here carrying its
//! canonical name and default threshold.

use crate::classify::{LossKind, TrainedClassifier};
use crate::corpus::Message;
use crate::eval::Highlighter;
use crate::lime::{self, Explanation, LimeConfig, LimeError};
use crate::tagger::{self, EmbeddingTable, TaggerConfig, TaggerMode, TaggerParams};
use crate::tfidf::{self, TfidfModel};
use std::fmt;
use std::str::FromStr;

/// Canonical names of the five benchmark models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Tfidf,
    LrLime,
    SvmLime,
    UnigramTagger,
    NgramTagger,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Tfidf,
        ModelKind::LrLime,
        ModelKind::SvmLime,
        ModelKind::UnigramTagger,
        ModelKind::NgramTagger,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Tfidf => "tfidf",
            ModelKind::LrLime => "lr+lime",
            ModelKind::SvmLime => "svm+lime",
            ModelKind::UnigramTagger => "unigram-tagger",
            ModelKind::NgramTagger => "ngram-tagger",
        }
    }

    pub fn default_threshold(&self) -> f64 {
        match self {
            ModelKind::Tfidf => tfidf::DEFAULT_THRESHOLD,
            ModelKind::LrLime | ModelKind::SvmLime => lime::DEFAULT_THRESHOLD,
            ModelKind::UnigramTagger | ModelKind::NgramTagger => tagger::DEFAULT_THRESHOLD,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ModelKind, String> {
        ModelKind::ALL
            .into_iter()
            .find(|kind| kind.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown model {s:?} (expected one of tfidf, lr+lime, svm+lime, \
                     unigram-tagger, ngram-tagger)"
                )
            })
    }
}

// ---------------------------------------------------------------------------
// TF-IDF

pub struct TfidfHighlighter {
    pub model: TfidfModel,
}

impl Highlighter for TfidfHighlighter {
    fn model_name(&self) -> &str {
        ModelKind::Tfidf.as_str()
    }

    fn default_threshold(&self) -> f64 {
        tfidf::DEFAULT_THRESHOLD
    }

    fn score_message(&self, message: &Message) -> Vec<f64> {
        self.model.highlight_scores(message)
    }
}

// ---------------------------------------------------------------------------
// Classifier + LIME

pub struct LimeHighlighter {
    pub classifier: TrainedClassifier,
    pub config: LimeConfig,
}

impl LimeHighlighter {
    pub fn new(classifier: TrainedClassifier, config: LimeConfig) -> LimeHighlighter {
        LimeHighlighter { classifier, config }
    }

    pub fn kind(&self) -> ModelKind {
        match self.classifier.model.loss {
            LossKind::Logistic => ModelKind::LrLime,
            LossKind::Hinge => ModelKind::SvmLime,
        }
    }
}

/// Explains one message: the target class is the classifier's top prediction
/// on the full message, the black box its probability for that class as
/// tokens are removed.
pub fn explain_message(
    classifier: &TrainedClassifier,
    message: &Message,
    config: &LimeConfig,
) -> Result<Explanation, LimeError> {
    let norms = message.norms();
    if norms.is_empty() {
        return Err(LimeError::EmptyMessage);
    }
    let full = classifier.predict_proba_tokens(&norms);
    let target_idx = full
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(idx, _)| idx)
        .expect("classifier has classes");
    let target_class = classifier.model.classes[target_idx];
    let blackbox = |mask: &[bool]| {
        let kept: Vec<String> = norms
            .iter()
            .zip(mask)
            .filter(|&(_, &keep)| keep)
            .map(|(norm, _)| norm.clone())
            .collect();
        classifier.predict_proba_tokens(&kept)[target_idx]
    };
    lime::explain(blackbox, norms.len(), target_class, config)
}

impl Highlighter for LimeHighlighter {
    fn model_name(&self) -> &str {
        self.kind().as_str()
    }

    fn default_threshold(&self) -> f64 {
        lime::DEFAULT_THRESHOLD
    }

    fn score_message(&self, message: &Message) -> Vec<f64> {
        match explain_message(&self.classifier, message, &self.config) {
            Ok(explanation) => lime::highlight_scores_from_explanation(&explanation),
            // Only an empty message reaches here; it has no tokens to score.
            Err(_) => Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Tagger

pub struct TaggerHighlighter {
    pub params: TaggerParams,
    pub config: TaggerConfig,
    pub table: EmbeddingTable,
}

impl TaggerHighlighter {
    pub fn kind(&self) -> ModelKind {
        match self.config.mode {
            TaggerMode::Unigram => ModelKind::UnigramTagger,
            TaggerMode::Ngram => ModelKind::NgramTagger,
        }
    }
}

impl Highlighter for TaggerHighlighter {
    fn model_name(&self) -> &str {
        self.kind().as_str()
    }

    fn default_threshold(&self) -> f64 {
        tagger::DEFAULT_THRESHOLD
    }

    fn score_message(&self, message: &Message) -> Vec<f64> {
        tagger::predict(&self.params, &self.config, &self.table, message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train, FeatureSpace, TrainConfig};
    use crate::corpus::{Conversation, IssueCategory, Role};

    fn toy_corpus() -> Vec<Conversation> {
        let build = |id: &str, category: IssueCategory, text: &str| Conversation {
            id: id.to_string(),
            issue_category: Some(category),
            messages: vec![Message::new(Role::Patient, text, None).unwrap()],
        };
        vec![
            build("a", IssueCategory::Skin, "itchy rash on my arm"),
            build("b", IssueCategory::Skin, "red rash and dry skin"),
            build("c", IssueCategory::Covid19, "fever and dry cough"),
            build("d", IssueCategory::Covid19, "lost taste and fever"),
            build("e", IssueCategory::Pregnancy, "missed period pregnancy test"),
            build("f", IssueCategory::Pregnancy, "pregnancy test was positive"),
        ]
    }

    #[test]
    fn model_names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("bert".parse::<ModelKind>().is_err());
    }

    fn toy_classifier(corpus: &[Conversation]) -> TrainedClassifier {
        let tfidf = TfidfModel::fit(corpus).unwrap();
        let space = FeatureSpace::from_model(tfidf);
        let fit = train(&space, corpus, &TrainConfig::default()).unwrap();
        TrainedClassifier {
            space,
            model: fit.model,
        }
    }

    #[test]
    fn tfidf_highlighter_matches_the_model() {
        let corpus = toy_corpus();
        let model = TfidfModel::fit(&corpus).unwrap();
        let message = &corpus[0].messages[0];
        let highlighter = TfidfHighlighter {
            model: model.clone(),
        };
        assert_eq!(
            highlighter.score_message(message),
            model.highlight_scores(message)
        );
        assert_eq!(highlighter.model_name(), "tfidf");
    }

    #[test]
    fn explanations_target_the_top_class_and_score_every_token() {
        let corpus = toy_corpus();
        let classifier = toy_classifier(&corpus);
        let message = &corpus[2].messages[0];
        let config = LimeConfig {
            n_samples: 400,
            ..LimeConfig::default()
        };
        let explanation = explain_message(&classifier, message, &config).unwrap();
        assert_eq!(
            explanation.target_class,
            classifier.predict(&corpus[2])
        );
        assert_eq!(explanation.word_weights.len(), message.tokens.len());

        let highlighter = LimeHighlighter::new(classifier, config);
        assert_eq!(highlighter.model_name(), "lr+lime");
        let scores = highlighter.score_message(message);
        assert_eq!(scores.len(), message.tokens.len());
        assert!(scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn lime_scores_are_deterministic() {
        let corpus = toy_corpus();
        let classifier = toy_classifier(&corpus);
        let config = LimeConfig {
            n_samples: 300,
            ..LimeConfig::default()
        };
        let highlighter = LimeHighlighter::new(classifier, config);
        let message = &corpus[4].messages[0];
        assert_eq!(
            highlighter.score_message(message),
            highlighter.score_message(message)
        );
    }

    #[test]
    fn tagger_highlighter_names_follow_the_mode() {
        let config = TaggerConfig {
            cells_per_direction: 2,
            dropout: 0.0,
            mode: TaggerMode::Ngram,
            cell: tagger::CellKind::Standard,
            max_seq_len: 16,
        };
        let table = EmbeddingTable {
            dim: 3,
            vectors: Default::default(),
            oov_vector: vec![0.0; 3],
        };
        let params = tagger::init_params(&config, 3, 0);
        let highlighter = TaggerHighlighter {
            params: params.clone(),
            config,
            table: table.clone(),
        };
        assert_eq!(highlighter.model_name(), "ngram-tagger");
        let unigram = TaggerHighlighter {
            params,
            config: TaggerConfig {
                mode: TaggerMode::Unigram,
                ..config
            },
            table,
        };
        assert_eq!(unigram.model_name(), "unigram-tagger");
        let message = Message::new(Role::Patient, "some fever words", None).unwrap();
        assert_eq!(unigram.score_message(&message).len(), 3);
    }
}
