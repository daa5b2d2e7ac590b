//! Issue-category classification over TF-IDF conversation vectors.
//!
//! A conversation is vectorized as its L2-normalized TF-IDF document vector
//! projected onto the training vocabulary. On top of that sit one-vs-rest
//! linear heads — logistic or hinge loss — trained by full-batch gradient
//! descent with L2 regularization on the weights (not the bias). The step
//! size self-adjusts: whenever a step would increase the loss beyond a 1e-9
//! slack it is rolled back and the learning rate halved, so the recorded
//! loss trace is non-increasing by construction.
//!
//! These classifiers exist to be explained: the LIME module probes them with
//! perturbed token lists to attribute the predicted category back to words.

use crate::corpus::{Conversation, IssueCategory};
use crate::math::{dot, sigmoid, softplus, Mat};
use crate::tfidf::TfidfModel;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("conversation {id} has no issue_category")]
    MissingCategory { id: String },
    #[error("training data holds fewer than two distinct categories")]
    SingleClass,
    #[error("loss became non-finite while training the {class} head")]
    NonFiniteLoss { class: IssueCategory },
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
    #[error("model file {path} does not match its embedded vocabulary (hash mismatch)")]
    HashMismatch { path: String },
    #[error("model file {path} has inconsistent shapes")]
    BadShape { path: String },
}

/// Sparse feature vector: `(column, value)` pairs sorted by column.
pub type SparseVector = Vec<(usize, f64)>;

/// The n-gram vocabulary (a dense bijection onto columns) plus the fitted
/// TF-IDF model that produces the raw document vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub vocabulary: BTreeMap<String, usize>,
    pub tfidf: TfidfModel,
}

impl FeatureSpace {
    /// Columns are assigned in sorted n-gram order, 0..V-1.
    pub fn from_model(tfidf: TfidfModel) -> FeatureSpace {
        let vocabulary = tfidf
            .df
            .keys()
            .enumerate()
            .map(|(idx, key)| (key.clone(), idx))
            .collect();
        FeatureSpace { vocabulary, tfidf }
    }

    pub fn dimension(&self) -> usize {
        self.vocabulary.len()
    }

    /// Projects the conversation's normalized document vector onto the
    /// vocabulary; out-of-vocabulary n-grams are dropped.
    pub fn vectorize(&self, conversation: &Conversation) -> SparseVector {
        self.vectorize_tokens(&conversation.all_norms())
    }

    /// Same as [`vectorize`](Self::vectorize) on bare token norms. This is
    /// the entry point LIME uses with perturbed token lists.
    pub fn vectorize_tokens(&self, norms: &[String]) -> SparseVector {
        self.tfidf
            .document_vector(norms)
            .into_iter()
            .filter_map(|(key, value)| self.vocabulary.get(&key).map(|&idx| (idx, value)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Hinge,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Hinge => "hinge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Logistic,
            l2: 1e-4,
            learning_rate: 0.5,
            epochs: 300,
            seed: 0,
        }
    }
}

/// One-vs-rest linear model over the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub loss: LossKind,
    pub classes: Vec<IssueCategory>,
    /// `classes x dimension` weight matrix.
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl LinearModel {
    /// Per-class margins `w_c . x + b_c`.
    pub fn margins(&self, x: &SparseVector) -> Vec<f64> {
        self.classes
            .iter()
            .enumerate()
            .map(|(c, _)| {
                let row = self.weights.row(c);
                self.bias[c] + x.iter().map(|&(j, v)| row[j] * v).sum::<f64>()
            })
            .collect()
    }

    /// Probability distribution over the classes. Logistic heads squash each
    /// margin through a sigmoid and normalize; hinge heads go through a
    /// softmax. Either way the result sums to one.
    pub fn predict_proba(&self, x: &SparseVector) -> Vec<f64> {
        let margins = self.margins(x);
        match self.loss {
            LossKind::Logistic => {
                let raw: Vec<f64> = margins.iter().map(|&z| sigmoid(z)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|&p| p / total).collect()
            }
            LossKind::Hinge => {
                let max = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = margins.iter().map(|&z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|&e| e / total).collect()
            }
        }
    }

    pub fn predict(&self, x: &SparseVector) -> IssueCategory {
        let margins = self.margins(x);
        let (best, _) = margins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite margins"))
            .expect("at least one class");
        self.classes[best]
    }
}

/// A feature space and the linear model trained on it — the unit that gets
/// saved to disk and later explained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub space: FeatureSpace,
    pub model: LinearModel,
}

/// On-disk layout: classes, loss kind, dense weight rows, bias, the feature
/// space itself, and an FNV-1a hash of the vocabulary so a model can never
/// be silently applied on top of the wrong feature space.
#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    loss_kind: LossKind,
    classes: Vec<IssueCategory>,
    vocabulary_hash: String,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    feature_space: FeatureSpace,
}

fn vocabulary_hash(vocabulary: &BTreeMap<String, usize>) -> String {
    // FNV-1a over "term NUL index" in sorted term order.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |byte: u8| {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (term, &idx) in vocabulary {
        for &byte in term.as_bytes() {
            mix(byte);
        }
        mix(0);
        for byte in (idx as u64).to_le_bytes() {
            mix(byte);
        }
    }
    format!("{hash:016x}")
}

impl TrainedClassifier {
    pub fn predict_proba(&self, conversation: &Conversation) -> Vec<f64> {
        self.model.predict_proba(&self.space.vectorize(conversation))
    }

    pub fn predict_proba_tokens(&self, norms: &[String]) -> Vec<f64> {
        self.model.predict_proba(&self.space.vectorize_tokens(norms))
    }

    pub fn predict(&self, conversation: &Conversation) -> IssueCategory {
        self.model.predict(&self.space.vectorize(conversation))
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifyError> {
        let file = ClassifierFile {
            loss_kind: self.model.loss,
            classes: self.model.classes.clone(),
            vocabulary_hash: vocabulary_hash(&self.space.vocabulary),
            weights: (0..self.model.weights.rows)
                .map(|r| self.model.weights.row(r).to_vec())
                .collect(),
            bias: self.model.bias.clone(),
            feature_space: self.space.clone(),
        };
        let json = serde_json::to_string(&file).expect("model serializes");
        fs::write(path, json).map_err(|source| ClassifyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<TrainedClassifier, ClassifyError> {
        let text = fs::read_to_string(path).map_err(|source| ClassifyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ClassifierFile =
            serde_json::from_str(&text).map_err(|source| ClassifyError::Json {
                path: path.display().to_string(),
                source,
            })?;
        if vocabulary_hash(&file.feature_space.vocabulary) != file.vocabulary_hash {
            return Err(ClassifyError::HashMismatch {
                path: path.display().to_string(),
            });
        }
        let dim = file.feature_space.dimension();
        if file.weights.len() != file.classes.len()
            || file.bias.len() != file.classes.len()
            || file.weights.iter().any(|row| row.len() != dim)
        {
            return Err(ClassifyError::BadShape {
                path: path.display().to_string(),
            });
        }
        let mut weights = Mat::zeros(file.classes.len(), dim);
        for (r, row) in file.weights.iter().enumerate() {
            weights.row_mut(r).copy_from_slice(row);
        }
        Ok(TrainedClassifier {
            space: file.feature_space,
            model: LinearModel {
                loss: file.loss_kind,
                classes: file.classes,
                weights,
                bias: file.bias,
            },
        })
    }
}

/// Training output: the model plus the per-class loss traces (one value per
/// accepted epoch), which are non-increasing up to a 1e-9 slack.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: LinearModel,
    pub loss_traces: Vec<Vec<f64>>,
}

/// Trains one-vs-rest heads by full-batch gradient descent. Deterministic
/// for a fixed config: initialization comes from a seeded RNG and samples
/// are visited in dataset order.
pub fn train(
    space: &FeatureSpace,
    conversations: &[Conversation],
    config: &TrainConfig,
) -> Result<FitResult, ClassifyError> {
    let mut categories: Vec<IssueCategory> = Vec::new();
    let mut targets = Vec::with_capacity(conversations.len());
    for conversation in conversations {
        let category = conversation
            .issue_category
            .ok_or_else(|| ClassifyError::MissingCategory {
                id: conversation.id.clone(),
            })?;
        targets.push(category);
        if !categories.contains(&category) {
            categories.push(category);
        }
    }
    categories.sort();
    if categories.len() < 2 {
        return Err(ClassifyError::SingleClass);
    }

    let features: Vec<SparseVector> = conversations.iter().map(|c| space.vectorize(c)).collect();
    let dim = space.dimension();

    let mut weights = Mat::zeros(categories.len(), dim);
    let mut bias = vec![0.0; categories.len()];
    let mut loss_traces = Vec::with_capacity(categories.len());
    for (c, &class) in categories.iter().enumerate() {
        let labels: Vec<f64> = targets
            .iter()
            .map(|&t| if t == class { 1.0 } else { 0.0 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_add((c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        let head = Head {
            loss: config.loss,
            l2: config.l2,
            features: &features,
            labels: &labels,
        };
        let trace = train_head(
            &head,
            weights.row_mut(c),
            &mut bias[c],
            config,
            &mut rng,
        )
        .map_err(|_| ClassifyError::NonFiniteLoss { class })?;
        loss_traces.push(trace);
    }

    Ok(FitResult {
        model: LinearModel {
            loss: config.loss,
            classes: categories,
            weights,
            bias,
        },
        loss_traces,
    })
}

struct NonFinite;

/// The training objective of one one-vs-rest head, exposed so gradient
/// checks and custom optimizers can evaluate exactly what [`train`] descends.
pub struct Head<'a> {
    pub loss: LossKind,
    pub l2: f64,
    pub features: &'a [SparseVector],
    /// 0/1 target per feature row.
    pub labels: &'a [f64],
}

impl Head<'_> {
    fn margin(&self, w: &[f64], b: f64, x: &SparseVector) -> f64 {
        b + x.iter().map(|&(j, v)| w[j] * v).sum::<f64>()
    }

    /// Full regularized loss (bias unregularized).
    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.features.len() as f64;
        let data: f64 = self
            .features
            .iter()
            .zip(self.labels)
            .map(|(x, &y)| {
                let z = self.margin(w, b, x);
                match self.loss {
                    LossKind::Logistic => softplus(z) - y * z,
                    LossKind::Hinge => {
                        let s = 2.0 * y - 1.0;
                        (1.0 - s * z).max(0.0)
                    }
                }
            })
            .sum::<f64>()
            / n;
        data + 0.5 * self.l2 * dot(w, w)
    }

    /// Analytic gradient of [`loss`](Self::loss); for the hinge head this is
    /// the subgradient, which coincides with the derivative away from the
    /// margin kink.
    pub fn grad(&self, w: &[f64], b: f64, gw: &mut [f64], gb: &mut f64) {
        for g in gw.iter_mut() {
            *g = 0.0;
        }
        *gb = 0.0;
        let n = self.features.len() as f64;
        for (x, &y) in self.features.iter().zip(self.labels) {
            let z = self.margin(w, b, x);
            let coef = match self.loss {
                LossKind::Logistic => (sigmoid(z) - y) / n,
                LossKind::Hinge => {
                    let s = 2.0 * y - 1.0;
                    if 1.0 - s * z > 0.0 {
                        -s / n
                    } else {
                        0.0
                    }
                }
            };
            if coef != 0.0 {
                for &(j, v) in x {
                    gw[j] += coef * v;
                }
                *gb += coef;
            }
        }
        for (g, &wj) in gw.iter_mut().zip(w.iter()) {
            *g += self.l2 * wj;
        }
    }
}

/// Gradient descent with rollback: a step that raises the loss by more than
/// 1e-9 is undone and the step size halved before retrying, so the returned
/// trace never increases beyond that slack.
fn train_head(
    head: &Head<'_>,
    w: &mut [f64],
    b: &mut f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, NonFinite> {
    for wj in w.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *wj = 0.01 * z;
    }
    *b = 0.0;

    let mut lr = config.learning_rate;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    let mut loss = head.loss(w, *b);
    if !loss.is_finite() {
        return Err(NonFinite);
    }
    let mut trace = Vec::with_capacity(config.epochs + 1);
    trace.push(loss);

    for _ in 0..config.epochs {
        head.grad(w, *b, &mut gw, &mut gb);
        loop {
            let trial_w: Vec<f64> = w.iter().zip(&gw).map(|(&wj, &g)| wj - lr * g).collect();
            let trial_b = *b - lr * gb;
            let trial_loss = head.loss(&trial_w, trial_b);
            if !trial_loss.is_finite() {
                return Err(NonFinite);
            }
            if trial_loss <= loss + 1e-9 {
                w.copy_from_slice(&trial_w);
                *b = trial_b;
                loss = trial_loss;
                trace.push(loss);
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                // No descent direction at any representable step; settle.
                trace.push(loss);
                break;
            }
        }
    }
    Ok(trace)
}

/// Per-class one-vs-rest counts and derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: IssueCategory,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Argmax predictions against gold categories, reported one-vs-rest per
/// class with the 0/0 -> 0 convention.
pub fn evaluate_classifier(
    classifier: &TrainedClassifier,
    conversations: &[Conversation],
) -> Result<ClassifierReport, ClassifyError> {
    let mut gold = Vec::with_capacity(conversations.len());
    let mut predicted = Vec::with_capacity(conversations.len());
    for conversation in conversations {
        let category = conversation
            .issue_category
            .ok_or_else(|| ClassifyError::MissingCategory {
                id: conversation.id.clone(),
            })?;
        gold.push(category);
        predicted.push(classifier.predict(conversation));
    }

    let correct = gold
        .iter()
        .zip(&predicted)
        .filter(|(g, p)| g == p)
        .count();
    let accuracy = if gold.is_empty() {
        0.0
    } else {
        correct as f64 / gold.len() as f64
    };

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class = classifier
        .model
        .classes
        .iter()
        .map(|&class| {
            let tp = gold
                .iter()
                .zip(&predicted)
                .filter(|&(&g, &p)| g == class && p == class)
                .count();
            let fp = gold
                .iter()
                .zip(&predicted)
                .filter(|&(&g, &p)| g != class && p == class)
                .count();
            let fn_ = gold
                .iter()
                .zip(&predicted)
                .filter(|&(&g, &p)| g == class && p != class)
                .count();
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class,
                support: tp + fn_,
                precision,
                recall,
                f1,
            }
        })
        .collect();

    Ok(ClassifierReport {
        accuracy,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Message, Role};
    use approx::assert_abs_diff_eq;

    fn conversation(id: &str, category: Option<IssueCategory>, text: &str) -> Conversation {
        Conversation {
            id: id.to_string(),
            issue_category: category,
            messages: vec![Message::new(Role::Patient, text, None).unwrap()],
        }
    }

    /// A small separable corpus: each category has its own marker word.
    fn toy_corpus() -> Vec<Conversation> {
        let specs = [
            (IssueCategory::Skin, "rash itchy arm rash"),
            (IssueCategory::Skin, "dry rash itchy leg"),
            (IssueCategory::Skin, "rash again itchy"),
            (IssueCategory::Covid19, "cough fever test cough"),
            (IssueCategory::Covid19, "fever cough positive"),
            (IssueCategory::Covid19, "cough cough fever"),
            (IssueCategory::Pregnancy, "baby weeks nausea baby"),
            (IssueCategory::Pregnancy, "weeks baby scan"),
            (IssueCategory::Pregnancy, "baby nausea weeks"),
        ];
        specs
            .iter()
            .enumerate()
            .map(|(i, (cat, text))| conversation(&format!("c{i}"), Some(*cat), text))
            .collect()
    }

    fn toy_space(convs: &[Conversation]) -> FeatureSpace {
        FeatureSpace::from_model(TfidfModel::fit(convs).unwrap())
    }

    #[test]
    fn vectorize_matches_restricted_document_vector() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let x = space.vectorize(&convs[0]);
        let full = space.tfidf.document_vector(&convs[0].all_norms());
        assert_eq!(x.len(), full.len()); // every training n-gram is in-vocabulary
        for &(idx, value) in &x {
            let (key, &vocab_idx) = space
                .vocabulary
                .iter()
                .find(|(_, &v)| v == idx)
                .expect("column maps back to an n-gram");
            assert_eq!(vocab_idx, idx);
            assert_abs_diff_eq!(full[key], value, epsilon = 1e-15);
        }
        // Out-of-vocabulary n-grams are dropped.
        let oov = conversation("x", None, "totally unseen words");
        assert!(space.vectorize(&oov).is_empty());
    }

    #[test]
    fn empty_conversation_gives_zero_vector() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let empty = Conversation {
            id: "e".into(),
            issue_category: None,
            messages: vec![],
        };
        assert!(space.vectorize(&empty).is_empty());
    }

    #[test]
    fn vocabulary_is_a_dense_bijection() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let mut columns: Vec<usize> = space.vocabulary.values().copied().collect();
        columns.sort_unstable();
        let expected: Vec<usize> = (0..space.dimension()).collect();
        assert_eq!(columns, expected);
    }

    /// Central finite differences over every coordinate of a head's loss.
    fn finite_difference_check(loss_kind: LossKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 6;
        let mut checked = 0;
        'outer: while checked < 10 {
            let n = rng.random_range(3..=8);
            let mut features: Vec<SparseVector> = Vec::with_capacity(n);
            for _ in 0..n {
                let mut x = SparseVector::new();
                for j in 0..dim {
                    if rng.random_range(0..2) == 1 {
                        x.push((j, rng.random_range(-10..10) as f64 / 10.0));
                    }
                }
                features.push(x);
            }
            let features = features;
            let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let head = Head {
                loss: loss_kind,
                l2: 0.01,
                features: &features,
                labels: &labels,
            };
            let w: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                .collect();
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
            if loss_kind == LossKind::Hinge {
                // The hinge subgradient is undefined on the kink; keep the
                // probe point safely away from it.
                for (x, &y) in features.iter().zip(&labels) {
                    let s = 2.0 * y - 1.0;
                    if (1.0 - s * head.margin(&w, b, x)).abs() < 0.05 {
                        continue 'outer;
                    }
                }
            }
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            head.grad(&w, b, &mut gw, &mut gb);

            let h = 1e-6;
            let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            for j in 0..dim {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (head.loss(&wp, b) - head.loss(&wm, b)) / (2.0 * h);
                assert!(
                    rel(gw[j], fd) < 1e-5,
                    "{loss_kind:?} w[{j}]: analytic {} vs fd {fd}",
                    gw[j]
                );
            }
            let fd = (head.loss(&w, b + h) - head.loss(&w, b - h)) / (2.0 * h);
            assert!(rel(gb, fd) < 1e-5, "{loss_kind:?} bias");
            checked += 1;
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        finite_difference_check(LossKind::Logistic);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        finite_difference_check(LossKind::Hinge);
    }

    #[test]
    fn separable_corpus_reaches_full_training_accuracy() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        for loss in [LossKind::Logistic, LossKind::Hinge] {
            let config = TrainConfig {
                loss,
                epochs: 200,
                ..TrainConfig::default()
            };
            let fit = train(&space, &convs, &config).unwrap();
            let classifier = TrainedClassifier {
                space: space.clone(),
                model: fit.model,
            };
            let report = evaluate_classifier(&classifier, &convs).unwrap();
            assert_eq!(report.accuracy, 1.0, "{loss:?}");
        }
    }

    #[test]
    fn loss_trace_is_non_increasing() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        for loss in [LossKind::Logistic, LossKind::Hinge] {
            let fit = train(
                &space,
                &convs,
                &TrainConfig {
                    loss,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            for trace in &fit.loss_traces {
                for pair in trace.windows(2) {
                    assert!(pair[1] <= pair[0] + 1e-9, "{loss:?}: {} -> {}", pair[0], pair[1]);
                }
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        for loss in [LossKind::Logistic, LossKind::Hinge] {
            let fit = train(
                &space,
                &convs,
                &TrainConfig {
                    loss,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            for conv in &convs {
                let proba = fit.model.predict_proba(&space.vectorize(conv));
                let total: f64 = proba.iter().sum();
                assert!((total - 1.0).abs() <= 1e-9, "{loss:?} sums to {total}");
                assert!(proba.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn identical_features_give_uniform_probabilities() {
        // Every conversation has the same text, labels are balanced: each
        // head can only learn the base rate, so probabilities are ~1/3.
        let cats = [
            IssueCategory::Skin,
            IssueCategory::Covid19,
            IssueCategory::Pregnancy,
        ];
        let convs: Vec<Conversation> = (0..12)
            .map(|i| conversation(&format!("c{i}"), Some(cats[i % 3]), "same words here"))
            .collect();
        let space = toy_space(&convs);
        let fit = train(&space, &convs, &TrainConfig::default()).unwrap();
        let proba = fit.model.predict_proba(&space.vectorize(&convs[0]));
        for &p in &proba {
            assert!((p - 1.0 / 3.0).abs() < 0.05, "probability {p}");
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let config = TrainConfig {
            seed: 99,
            ..TrainConfig::default()
        };
        let a = train(&space, &convs, &config).unwrap();
        let b = train(&space, &convs, &config).unwrap();
        assert_eq!(a.model, b.model);
        // A different seed starts elsewhere.
        let c = train(
            &space,
            &convs,
            &TrainConfig {
                seed: 100,
                ..config
            },
        )
        .unwrap();
        assert_ne!(a.model.weights.data, c.model.weights.data);
    }

    #[test]
    fn feature_scaling_preserves_argmax_without_regularization() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let config = TrainConfig {
            l2: 0.0,
            epochs: 600,
            ..TrainConfig::default()
        };
        let base = train(&space, &convs, &config).unwrap();

        // Scale every feature vector by a constant at train and test time by
        // scaling the document vectors through a wrapper space.
        let scale = 3.0;
        let features: Vec<SparseVector> = convs
            .iter()
            .map(|c| {
                space
                    .vectorize(c)
                    .into_iter()
                    .map(|(j, v)| (j, v * scale))
                    .collect()
            })
            .collect();
        // Train directly on the scaled vectors through the head machinery.
        let mut categories: Vec<IssueCategory> =
            convs.iter().filter_map(|c| c.issue_category).collect();
        categories.sort();
        categories.dedup();
        let mut weights = Mat::zeros(categories.len(), space.dimension());
        let mut bias = vec![0.0; categories.len()];
        for (c, &class) in categories.iter().enumerate() {
            let labels: Vec<f64> = convs
                .iter()
                .map(|conv| {
                    if conv.issue_category == Some(class) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let head = Head {
                loss: config.loss,
                l2: 0.0,
                features: &features,
                labels: &labels,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_add((c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            );
            train_head(&head, weights.row_mut(c), &mut bias[c], &config, &mut rng).ok();
        }
        let scaled_model = LinearModel {
            loss: config.loss,
            classes: categories,
            weights,
            bias,
        };
        for (conv, x) in convs.iter().zip(&features) {
            assert_eq!(base.model.predict(&space.vectorize(conv)), scaled_model.predict(x));
        }
    }

    #[test]
    fn single_class_and_missing_category_are_rejected() {
        let convs = vec![
            conversation("a", Some(IssueCategory::Skin), "rash"),
            conversation("b", Some(IssueCategory::Skin), "itchy"),
        ];
        let space = toy_space(&convs);
        assert!(matches!(
            train(&space, &convs, &TrainConfig::default()),
            Err(ClassifyError::SingleClass)
        ));

        let convs = vec![
            conversation("a", Some(IssueCategory::Skin), "rash"),
            conversation("b", None, "itchy"),
        ];
        assert!(matches!(
            train(&space, &convs, &TrainConfig::default()),
            Err(ClassifyError::MissingCategory { .. })
        ));
    }

    #[test]
    fn classifier_round_trips_through_json() {
        let convs = toy_corpus();
        let space = toy_space(&convs);
        let fit = train(&space, &convs, &TrainConfig::default()).unwrap();
        let classifier = TrainedClassifier {
            space,
            model: fit.model,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        classifier.save(&path).unwrap();
        assert_eq!(TrainedClassifier::load(&path).unwrap(), classifier);

        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in [
            "loss_kind",
            "classes",
            "vocabulary_hash",
            "weights",
            "bias",
            "feature_space",
        ] {
            assert!(raw.get(key).is_some(), "missing key {key}");
        }

        // A vocabulary edit invalidates the stored hash.
        let mut tampered = raw.clone();
        let vocab = tampered["feature_space"]["vocabulary"]
            .as_object_mut()
            .unwrap();
        vocab.insert("zzz bogus".into(), serde_json::json!(999));
        let tampered_path = dir.path().join("tampered.json");
        std::fs::write(&tampered_path, tampered.to_string()).unwrap();
        assert!(matches!(
            TrainedClassifier::load(&tampered_path),
            Err(ClassifyError::HashMismatch { .. })
        ));
    }
}
