//! Threshold metrics, ranking metrics, inter-annotator agreement and pooled
//! model evaluation.
//!
//! All token-level evaluation is micro-averaged: scores and gold labels are
//! pooled across the patient messages of a dataset (doctor turns are never
//! scored against gold) and every metric is computed once over that pool.
//!
//! ROC-AUC uses the rank-statistic (Mann-Whitney) form with midranks for
//! tied scores; PR-AUC is step-wise average precision with tied scores
//! collapsed into one cut point. Agreement is Krippendorff's alpha for
//! nominal data on a coincidence matrix, with missing ratings allowed; the
//! expected disagreement is the with-replacement (large-sample) form, under
//! which two annotators who disagree on every unit of a balanced binary task
//! score exactly -1.

use crate::corpus::{AnnotationSet, Conversation, Message, Role};
use crate::tagger::{
    self, EmbeddingTable, TaggerConfig, TaggerError, TaggerParams, TrainHyper,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined: every token carries the same label")]
    SingleClass,
    #[error("agreement undefined: need two or more ratings on at least one unit")]
    InsufficientData,
    #[error("label value {value} is not 0 or 1")]
    BadLabel { value: u8 },
    #[error("no patient tokens with gold labels to evaluate on")]
    EmptyPool,
    #[error("requested {requested} training chats but only {available} are available")]
    NotEnoughChats { requested: usize, available: usize },
    #[error("fine-tuning failed while tracing the curve")]
    Train(#[from] TaggerError),
}

/// A pool of per-token scores with aligned 0/1 gold labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredTokens {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredTokens {
    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
        Ok(())
    }
}

/// One evaluated model: threshold metrics plus the ranking metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Anything that can assign one score per token of a message.
pub trait Highlighter {
    fn model_name(&self) -> &str;
    /// Default decision threshold for turning scores into highlights.
    fn default_threshold(&self) -> f64;
    /// One score per token, in token order.
    fn score_message(&self, message: &Message) -> Vec<f64>;
}

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
        return Err(EvalError::BadLabel { value: bad });
    }
    Ok(())
}

/// Precision and recall of `score >= threshold` against 0/1 labels, with the
/// 0/0 convention: no predicted positives means precision 0, no actual
/// positives means recall 0.
pub fn precision_recall_at(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<(f64, f64), EvalError> {
    check_pair(scores, labels)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok((precision, recall))
}

/// Area under the ROC curve via the rank statistic with midranks for ties:
/// `(R_pos - P(P+1)/2) / (P * N)` where `R_pos` is the rank sum of the
/// positive scores. Errors when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: a run of tied scores at sorted positions i..j (1-based ranks
    // i+1..=j) all receive the average rank (i + 1 + j) / 2.
    let n = scores.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Step-wise average precision: walking the distinct score values from high
/// to low, each cut point contributes `(recall gain) * precision`. Tied
/// scores form a single cut point. Errors when there is no positive label.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Krippendorff's alpha for nominal 0/1 data with missing ratings.
///
/// Units with fewer than two ratings are excluded. Observed disagreement is
/// the coincidence-matrix form (each unit's disagreeing ordered pairs,
/// weighted by `1/(m_u - 1)`); expected disagreement is the chance of two
/// values drawn with replacement from the pooled ratings disagreeing. When
/// there is no disagreement at all, alpha is 1.
pub fn krippendorff_alpha(annotations: &AnnotationSet) -> Result<f64, EvalError> {
    if annotations.annotator_labels.len() < 2 {
        return Err(EvalError::InsufficientData);
    }

    // Pairable values per unit, pooled totals per category.
    let mut n_by_cat = [0.0f64; 2];
    let mut observed_pairs = 0.0f64; // sum over units of disagreeing ordered pairs / (m_u - 1)
    let mut total = 0.0f64;
    for unit in 0..annotations.unit_count {
        let values: Vec<u8> = annotations
            .annotator_labels
            .iter()
            .filter_map(|row| row[unit])
            .collect();
        let m = values.len();
        if m < 2 {
            continue;
        }
        let ones = values.iter().filter(|&&v| v == 1).count() as f64;
        let zeros = (m as f64) - ones;
        n_by_cat[0] += zeros;
        n_by_cat[1] += ones;
        total += m as f64;
        // Disagreeing ordered pairs within the unit: 2 * zeros * ones.
        observed_pairs += 2.0 * zeros * ones / (m as f64 - 1.0);
    }
    if total == 0.0 {
        return Err(EvalError::InsufficientData);
    }

    let d_observed = observed_pairs / total;
    let d_expected = 2.0 * n_by_cat[0] * n_by_cat[1] / (total * total);
    if d_expected == 0.0 {
        // Only one value ever used: agreement is perfect by definition.
        return Ok(1.0);
    }
    Ok(1.0 - d_observed / d_expected)
}

/// Pools every gold-labeled patient message of the dataset through the model
/// and computes the full metric set at the given threshold.
pub fn evaluate_model(
    model: &dyn Highlighter,
    dataset: &[Conversation],
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let pool = pool_scores(model, dataset)?;
    metrics_from_pool(model.model_name(), &pool, threshold)
}

/// The pooled scores/labels that [`evaluate_model`] is computed over.
pub fn pool_scores(
    model: &dyn Highlighter,
    dataset: &[Conversation],
) -> Result<ScoredTokens, EvalError> {
    let mut pool = ScoredTokens::default();
    for conversation in dataset {
        for message in &conversation.messages {
            if message.role != Role::Patient {
                continue;
            }
            let Some(gold) = &message.gold else { continue };
            let scores = model.score_message(message);
            pool.extend(&scores, gold)?;
        }
    }
    if pool.scores.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    Ok(pool)
}

pub fn metrics_from_pool(
    model_name: &str,
    pool: &ScoredTokens,
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let (precision, recall) = precision_recall_at(&pool.scores, &pool.labels, threshold)?;
    Ok(MetricsReport {
        model: model_name.to_string(),
        threshold,
        precision,
        recall,
        roc_auc: roc_auc(&pool.scores, &pool.labels)?,
        pr_auc: pr_auc(&pool.scores, &pool.labels)?,
    })
}

// ---------------------------------------------------------------------------
// Learning curve

/// Controls for [`learning_curve`]. `hyper` (seed included) applies
/// identically at every point, so points differ only in their chat subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveOptions {
    /// Chat-count increment between points.
    pub step: usize,
    /// Largest chat count; the train set must hold at least this many.
    pub max: usize,
    /// Seed for subset selection (independent of the fine-tuning seed).
    pub seed: u64,
    /// Nested subsets (each point extends the previous) give a smoother
    /// curve; disable for independent per-point draws.
    pub nested: bool,
    pub hyper: TrainHyper,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            step: 10,
            max: 300,
            seed: 0,
            nested: true,
            hyper: TrainHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub pr_auc: f64,
    /// Train-set indices of the chats this point fine-tuned on, ascending.
    pub chats: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningCurve {
    pub mode: String,
    pub points: Vec<CurvePoint>,
}

struct TaggerAdapter<'a> {
    params: &'a TaggerParams,
    config: &'a TaggerConfig,
    table: &'a EmbeddingTable,
}

impl Highlighter for TaggerAdapter<'_> {
    fn model_name(&self) -> &str {
        self.config.mode.as_str()
    }

    fn default_threshold(&self) -> f64 {
        tagger::DEFAULT_THRESHOLD
    }

    fn score_message(&self, message: &Message) -> Vec<f64> {
        tagger::predict(self.params, self.config, self.table, message)
    }
}

/// Fine-tuning data-efficiency curve: for n = 0, `step`, 2·`step`, … up to
/// `max`, restore the pretrained weights, fine-tune on a seeded subset of n
/// training chats, and record test-set PR-AUC.
///
/// Subset indices are always presented in ascending train-set order, so the
/// point at n = full training set runs fine-tuning on exactly the original
/// sequence order and reproduces a direct fine-tune bit for bit.
pub fn learning_curve(
    base_params: &TaggerParams,
    config: &TaggerConfig,
    table: &EmbeddingTable,
    train: &[Conversation],
    test: &[Conversation],
    options: &CurveOptions,
) -> Result<LearningCurve, EvalError> {
    if options.max > train.len() {
        return Err(EvalError::NotEnoughChats {
            requested: options.max,
            available: train.len(),
        });
    }
    let step = options.step.max(1);
    let mut grid: Vec<usize> = (0..options.max).step_by(step).collect();
    grid.push(options.max);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut permutation: Vec<usize> = (0..train.len()).collect();
    permutation.shuffle(&mut rng);

    let mut points = Vec::with_capacity(grid.len());
    for n in grid {
        let mut chats: Vec<usize> = if options.nested {
            permutation[..n].to_vec()
        } else {
            rand::seq::index::sample(&mut rng, train.len(), n).into_vec()
        };
        chats.sort_unstable();
        let tuned;
        let params = if n == 0 {
            base_params
        } else {
            let subset: Vec<Conversation> =
                chats.iter().map(|&idx| train[idx].clone()).collect();
            tuned = tagger::finetune(base_params, table, &subset, config, &options.hyper)?.0;
            &tuned
        };
        let adapter = TaggerAdapter {
            params,
            config,
            table,
        };
        let pool = pool_scores(&adapter, test)?;
        points.push(CurvePoint {
            n,
            pr_auc: pr_auc(&pool.scores, &pool.labels)?,
            chats,
        });
    }
    Ok(LearningCurve {
        mode: config.mode.as_str().to_string(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::ChaCha8Rng;

    // ---- independent oracles ----------------------------------------------

    /// O(n^2) pairwise form of ROC-AUC: wins + half-ties over pos*neg pairs.
    fn oracle_roc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut numerator = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    numerator += 1.0;
                } else if scores[i] == scores[j] {
                    numerator += 0.5;
                }
            }
        }
        numerator / pairs
    }

    /// Cut-point enumeration of average precision: recount tp/fp from scratch
    /// at every distinct score, walking thresholds from high to low.
    fn oracle_pr(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let mut cuts: Vec<f64> = scores.to_vec();
        cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        cuts.dedup();
        let mut ap = 0.0f64;
        let mut prev_recall = 0.0f64;
        for &cut in &cuts {
            let mut tp = 0u64;
            let mut fp = 0u64;
            for (&s, &y) in scores.iter().zip(labels) {
                if s >= cut {
                    if y == 1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    /// Definitional alpha: observed disagreement by enumerating ordered pairs
    /// within each unit, expected disagreement by enumerating ordered pairs
    /// (with replacement) over the pooled bag of ratings.
    fn oracle_alpha(rows: &[Vec<Option<u8>>]) -> f64 {
        let units = rows[0].len();
        let mut pooled: Vec<u8> = Vec::new();
        let mut observed = 0.0f64;
        for u in 0..units {
            let vals: Vec<u8> = rows.iter().filter_map(|r| r[u]).collect();
            if vals.len() < 2 {
                continue;
            }
            let mut disagreeing = 0.0f64;
            for i in 0..vals.len() {
                for j in 0..vals.len() {
                    if i != j && vals[i] != vals[j] {
                        disagreeing += 1.0;
                    }
                }
            }
            observed += disagreeing / (vals.len() as f64 - 1.0);
            pooled.extend(vals);
        }
        if pooled.is_empty() {
            return f64::NAN;
        }
        let n = pooled.len() as f64;
        let d_o = observed / n;
        let mut expected_pairs = 0.0f64;
        for &a in &pooled {
            for &b in &pooled {
                if a != b {
                    expected_pairs += 1.0;
                }
            }
        }
        let d_e = expected_pairs / (n * n);
        if d_e == 0.0 {
            return 1.0;
        }
        1.0 - d_o / d_e
    }

    // ---- hand cases -------------------------------------------------------

    #[test]
    fn precision_recall_hand_counts() {
        let scores = [0.9, 0.8, 0.2, 0.6, 0.1];
        let labels = [1, 0, 1, 1, 0];
        // Predicted at 0.5: indices 0, 1, 3 -> tp = 2, fp = 1, fn = 1.
        let (p, r) = precision_recall_at(&scores, &labels, 0.5).unwrap();
        assert_abs_diff_eq!(p, 2.0 / 3.0);
        assert_abs_diff_eq!(r, 2.0 / 3.0);
        // A score exactly at the threshold counts as predicted.
        let (p, _) = precision_recall_at(&[0.5], &[1], 0.5).unwrap();
        assert_abs_diff_eq!(p, 1.0);
    }

    #[test]
    fn precision_recall_zero_over_zero_is_zero() {
        let (p, r) = precision_recall_at(&[0.1, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
        let (p, r) = precision_recall_at(&[0.9, 0.8], &[1, 1], 0.5).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn perfect_ranking_gives_unit_aucs() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [1, 1, 0, 0];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(pr_auc(&scores, &labels).unwrap(), 1.0);
        let reversed = [0, 0, 1, 1];
        assert_eq!(roc_auc(&scores, &reversed).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_scores_give_chance_level() {
        let scores = [0.4; 10];
        let labels = [1, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        assert_abs_diff_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
        // Average precision with one cut point equals the positive rate.
        assert_abs_diff_eq!(pr_auc(&scores, &labels).unwrap(), 0.3);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            pr_auc(&[0.1, 0.2], &[0, 0]),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn random_instances_match_oracles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..40 {
            let n = rng.random_range(2..=120);
            // A coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 / 7.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            // Guarantee both classes.
            labels[0] = 1;
            labels[n - 1] = 0;
            let got_roc = roc_auc(&scores, &labels).unwrap();
            let got_pr = pr_auc(&scores, &labels).unwrap();
            assert_eq!(got_roc, oracle_roc(&scores, &labels), "round {round}");
            assert_eq!(got_pr, oracle_pr(&scores, &labels), "round {round}");
        }
    }

    fn set(rows: Vec<Vec<Option<u8>>>) -> AnnotationSet {
        AnnotationSet::new(rows).unwrap()
    }

    #[test]
    fn alpha_is_one_on_perfect_agreement() {
        let a = set(vec![
            vec![Some(0), Some(1), Some(1), Some(0)],
            vec![Some(0), Some(1), Some(1), Some(0)],
            vec![Some(0), Some(1), Some(1), Some(0)],
        ]);
        assert_abs_diff_eq!(krippendorff_alpha(&a).unwrap(), 1.0, epsilon = 1e-12);
        // All ratings identical: expected disagreement is zero too.
        let b = set(vec![vec![Some(0), Some(0)], vec![Some(0), Some(0)]]);
        assert_eq!(krippendorff_alpha(&b).unwrap(), 1.0);
    }

    #[test]
    fn alpha_total_disagreement_hand_case() {
        let a = set(vec![
            vec![Some(0), Some(0), Some(1), Some(1)],
            vec![Some(1), Some(1), Some(0), Some(0)],
        ]);
        assert_abs_diff_eq!(krippendorff_alpha(&a).unwrap(), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn alpha_ignores_unpairable_units_and_handles_missing() {
        // Unit 2 has a single rating and must not contribute.
        let with_missing = set(vec![
            vec![Some(0), Some(1), Some(1)],
            vec![Some(0), Some(1), None],
        ]);
        let without = set(vec![vec![Some(0), Some(1)], vec![Some(0), Some(1)]]);
        assert_eq!(
            krippendorff_alpha(&with_missing).unwrap(),
            krippendorff_alpha(&without).unwrap()
        );
    }

    #[test]
    fn alpha_insufficient_data() {
        let one_annotator = set(vec![vec![Some(0), Some(1)]]);
        assert!(matches!(
            krippendorff_alpha(&one_annotator),
            Err(EvalError::InsufficientData)
        ));
        let no_overlap = set(vec![vec![Some(0), None], vec![None, Some(1)]]);
        assert!(matches!(
            krippendorff_alpha(&no_overlap),
            Err(EvalError::InsufficientData)
        ));
    }

    #[test]
    fn alpha_matches_pair_enumeration_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let annotators = rng.random_range(2..=5);
            let units = rng.random_range(2..=40);
            let rows: Vec<Vec<Option<u8>>> = (0..annotators)
                .map(|_| {
                    (0..units)
                        .map(|_| {
                            if rng.random_range(0..5) == 0 {
                                None
                            } else {
                                Some(rng.random_range(0..2) as u8)
                            }
                        })
                        .collect()
                })
                .collect();
            let want = oracle_alpha(&rows);
            let annotations = AnnotationSet::new(rows).unwrap();
            match krippendorff_alpha(&annotations) {
                Ok(got) => assert_abs_diff_eq!(got, want, epsilon = 1e-9),
                Err(EvalError::InsufficientData) => assert!(want.is_nan()),
                Err(other) => panic!("unexpected error {other}"),
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            roc_auc(&[0.1], &[1, 0]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    // ---- learning curve ---------------------------------------------------

    fn curve_table() -> EmbeddingTable {
        let words = [
            "fever", "rash", "cough", "nausea", "sofa", "tree", "lamp", "cloud", "i", "have",
            "my", "a",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut vectors = std::collections::BTreeMap::new();
        for w in words {
            vectors.insert(
                w.to_string(),
                (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
        }
        EmbeddingTable {
            dim: 4,
            oov_vector: vec![0.0; 4],
            vectors,
        }
    }

    fn curve_chats() -> (Vec<Conversation>, Vec<Conversation>) {
        use crate::corpus::{Message, Role};
        let build = |id: &str, text: &str, gold: Vec<u8>| Conversation {
            id: id.to_string(),
            issue_category: None,
            messages: vec![Message::new(Role::Patient, text, Some(gold)).unwrap()],
        };
        let train = vec![
            build("t0", "i have a fever", vec![0, 0, 0, 1]),
            build("t1", "my rash", vec![0, 1]),
            build("t2", "a sofa", vec![0, 0]),
            build("t3", "i have a cough", vec![0, 0, 0, 1]),
            build("t4", "my tree", vec![0, 0]),
            build("t5", "a nausea cloud", vec![0, 1, 0]),
        ];
        let test = vec![
            build("e0", "my fever", vec![0, 1]),
            build("e1", "a lamp", vec![0, 0]),
        ];
        (train, test)
    }

    fn curve_config() -> TaggerConfig {
        TaggerConfig {
            cells_per_direction: 3,
            dropout: 0.1,
            mode: crate::tagger::TaggerMode::Ngram,
            cell: crate::tagger::CellKind::Standard,
            max_seq_len: 16,
        }
    }

    fn curve_hyper() -> TrainHyper {
        TrainHyper {
            epochs: 3,
            batch_size: 2,
            lr: 1e-2,
            seed: 4,
            negative_ratio: 1.0,
        }
    }

    #[test]
    fn curve_full_point_reproduces_direct_finetune_bitwise() {
        let table = curve_table();
        let (train, test) = curve_chats();
        let config = curve_config();
        let base = crate::tagger::init_params(&config, table.dim, 2);
        let options = CurveOptions {
            step: 2,
            max: train.len(),
            seed: 11,
            nested: true,
            hyper: curve_hyper(),
        };
        let curve = learning_curve(&base, &config, &table, &train, &test, &options).unwrap();
        assert_eq!(
            curve.points.iter().map(|p| p.n).collect::<Vec<_>>(),
            vec![0, 2, 4, 6]
        );
        let last = curve.points.last().unwrap();
        assert_eq!(last.chats, vec![0, 1, 2, 3, 4, 5]);

        let (tuned, _) =
            crate::tagger::finetune(&base, &table, &train, &config, &options.hyper).unwrap();
        let adapter = TaggerAdapter {
            params: &tuned,
            config: &config,
            table: &table,
        };
        let pool = pool_scores(&adapter, &test).unwrap();
        let direct = pr_auc(&pool.scores, &pool.labels).unwrap();
        assert_eq!(last.pr_auc.to_bits(), direct.to_bits());
    }

    #[test]
    fn curve_zero_point_scores_the_pretrained_weights() {
        let table = curve_table();
        let (train, test) = curve_chats();
        let config = curve_config();
        let base = crate::tagger::init_params(&config, table.dim, 2);
        let options = CurveOptions {
            step: 3,
            max: 3,
            seed: 1,
            nested: true,
            hyper: curve_hyper(),
        };
        let curve = learning_curve(&base, &config, &table, &train, &test, &options).unwrap();
        let zero = &curve.points[0];
        assert_eq!(zero.n, 0);
        assert!(zero.chats.is_empty());
        let adapter = TaggerAdapter {
            params: &base,
            config: &config,
            table: &table,
        };
        let pool = pool_scores(&adapter, &test).unwrap();
        let direct = pr_auc(&pool.scores, &pool.labels).unwrap();
        assert_eq!(zero.pr_auc.to_bits(), direct.to_bits());
    }

    #[test]
    fn curve_subsets_are_nested_and_sorted() {
        let table = curve_table();
        let (train, test) = curve_chats();
        let config = curve_config();
        let base = crate::tagger::init_params(&config, table.dim, 2);
        let options = CurveOptions {
            step: 2,
            max: 6,
            seed: 8,
            nested: true,
            hyper: curve_hyper(),
        };
        let curve = learning_curve(&base, &config, &table, &train, &test, &options).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[0]
                .chats
                .iter()
                .all(|c| pair[1].chats.contains(c)));
        }
        for point in &curve.points {
            assert!(point.chats.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(point.chats.len(), point.n);
        }
    }

    #[test]
    fn curve_runs_are_deterministic_with_and_without_nesting() {
        let table = curve_table();
        let (train, test) = curve_chats();
        let config = curve_config();
        let base = crate::tagger::init_params(&config, table.dim, 2);
        for nested in [true, false] {
            let options = CurveOptions {
                step: 3,
                max: 6,
                seed: 8,
                nested,
                hyper: curve_hyper(),
            };
            let a = learning_curve(&base, &config, &table, &train, &test, &options).unwrap();
            let b = learning_curve(&base, &config, &table, &train, &test, &options).unwrap();
            assert_eq!(a, b);
            for point in &a.points {
                assert_eq!(point.chats.len(), point.n);
                assert!(point.chats.iter().all(|&c| c < train.len()));
            }
        }
    }

    #[test]
    fn curve_rejects_a_train_set_smaller_than_max() {
        let table = curve_table();
        let (train, test) = curve_chats();
        let config = curve_config();
        let base = crate::tagger::init_params(&config, table.dim, 2);
        let options = CurveOptions {
            step: 10,
            max: 300,
            seed: 0,
            nested: true,
            hyper: curve_hyper(),
        };
        assert!(matches!(
            learning_curve(&base, &config, &table, &train, &test, &options),
            Err(EvalError::NotEnoughChats {
                requested: 300,
                available: 6,
            })
        ));
    }
}
