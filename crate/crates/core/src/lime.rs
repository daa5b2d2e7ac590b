//! Local surrogate explanations of classifier predictions.
//!
//! To explain one prediction, the message's tokens are perturbed by dropping
//! random subsets of positions, the black box is re-scored on every subset,
//! and a weighted linear surrogate is fitted to those scores — nearby subsets
//! (few words removed) weigh more through an exponential kernel over cosine
//! distance. The surrogate's coefficients are per-position attributions;
//! clipped at zero they become word highlight scores.
//!
//! The ridge fit is solved in closed form over T+1 unknowns (intercept plus
//! one slope per position); the intercept is left unpenalized, so a constant
//! black box comes back as exactly that constant with zero slopes.

use crate::corpus::IssueCategory;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default binary-highlight threshold on clipped attribution weights.
pub const DEFAULT_THRESHOLD: f64 = 0.005;

#[derive(Debug, Error)]
pub enum LimeError {
    #[error("cannot explain a message with no tokens")]
    EmptyMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    /// Total number of masks, the all-ones identity mask included.
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge_l2: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            n_samples: 5000,
            kernel_width: 0.75,
            ridge_l2: 1.0,
            seed: 0,
        }
    }
}

/// One perturbed input: which positions were kept, what the black box said,
/// and how close the mask is to the unperturbed message.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample {
    pub mask: Vec<bool>,
    pub model_score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub target_class: IssueCategory,
    /// One attribution per token position of the explained message.
    pub word_weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² of the surrogate fit; 1 means the black box is locally
    /// linear in the mask.
    pub fidelity_r2: f64,
}

/// Draws perturbation masks over `token_count` positions. The first mask is
/// always all-ones; each of the rest removes a uniformly chosen number of
/// positions in `1..=token_count`, at uniformly chosen distinct positions.
pub fn sample_perturbations(
    token_count: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<bool>>, LimeError> {
    if token_count == 0 {
        return Err(LimeError::EmptyMessage);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n_samples.max(1));
    masks.push(vec![true; token_count]);
    for _ in 1..n_samples {
        let mut mask = vec![true; token_count];
        let removals = rng.random_range(1..=token_count);
        for position in rand::seq::index::sample(&mut rng, token_count, removals) {
            mask[position] = false;
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// Kernel proximity of a mask to the all-ones mask: `exp(-D^2 / width^2)`
/// with `D` the cosine distance `1 - sqrt(kept / T)`. The all-zeros mask has
/// no direction, so its distance is taken as 1 — which is exactly where the
/// formula lands anyway.
pub fn kernel_weight(mask: &[bool], kernel_width: f64) -> f64 {
    let kept = mask.iter().filter(|&&m| m).count() as f64;
    let distance = 1.0 - (kept / mask.len() as f64).sqrt();
    (-distance * distance / (kernel_width * kernel_width)).exp()
}

/// Explains a scalar black-box score over `token_count` positions by fitting
/// the weighted ridge surrogate to perturbed inputs. The black box receives
/// each mask (true = token kept) and must return a finite score.
///
/// If every sampled mask is identical the slopes are unidentifiable; the
/// explanation degrades to zero weights, the weighted mean score as the
/// intercept, and zero fidelity.
pub fn explain<F>(
    mut blackbox: F,
    token_count: usize,
    target_class: IssueCategory,
    config: &LimeConfig,
) -> Result<Explanation, LimeError>
where
    F: FnMut(&[bool]) -> f64,
{
    let masks = sample_perturbations(token_count, config.n_samples, config.seed)?;
    let samples: Vec<PerturbationSample> = masks
        .into_iter()
        .map(|mask| {
            let model_score = blackbox(&mask);
            let weight = kernel_weight(&mask, config.kernel_width);
            PerturbationSample {
                mask,
                model_score,
                weight,
            }
        })
        .collect();

    let weight_total: f64 = samples.iter().map(|s| s.weight).sum();
    let weighted_mean = samples
        .iter()
        .map(|s| s.weight * s.model_score)
        .sum::<f64>()
        / weight_total;

    let degenerate = samples.windows(2).all(|w| w[0].mask == w[1].mask);
    if degenerate {
        return Ok(Explanation {
            target_class,
            word_weights: vec![0.0; token_count],
            intercept: weighted_mean,
            fidelity_r2: 0.0,
        });
    }

    let (a, b) = normal_equations(&samples, token_count, config.ridge_l2);
    // A is positive definite: the ridge covers the slope block and the
    // intercept column of the design is all-ones, so Cholesky cannot fail on
    // a non-degenerate sample set.
    let theta = nalgebra::linalg::Cholesky::new(a.clone())
        .map(|c| c.solve(&b))
        .unwrap_or_else(|| a.lu().solve(&b).expect("ridge system is nonsingular"));

    let intercept = theta[0];
    let word_weights: Vec<f64> = theta.iter().skip(1).copied().collect();

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for s in &samples {
        let predicted = intercept
            + s.mask
                .iter()
                .zip(&word_weights)
                .filter(|(&m, _)| m)
                .map(|(_, &w)| w)
                .sum::<f64>();
        ss_res += s.weight * (s.model_score - predicted) * (s.model_score - predicted);
        ss_tot += s.weight * (s.model_score - weighted_mean) * (s.model_score - weighted_mean);
    }
    let fidelity_r2 = if ss_tot < 1e-12 {
        if ss_res < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };

    Ok(Explanation {
        target_class,
        word_weights,
        intercept,
        fidelity_r2,
    })
}

/// Attributions to highlight scores: evidence *for* the class only, so
/// negative weights clip to zero.
pub fn highlight_scores_from_explanation(explanation: &Explanation) -> Vec<f64> {
    explanation
        .word_weights
        .iter()
        .map(|&w| w.max(0.0))
        .collect()
}

/// Accumulates the weighted ridge normal equations `A theta = b` with the
/// intercept in column 0 and no penalty on it.
fn normal_equations(
    samples: &[PerturbationSample],
    token_count: usize,
    ridge_l2: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = token_count + 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut kept = Vec::with_capacity(p);
    for s in samples {
        kept.clear();
        kept.push(0usize);
        kept.extend(
            s.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(j, _)| j + 1),
        );
        for &j in &kept {
            b[j] += s.weight * s.model_score;
            for &k in &kept {
                a[(j, k)] += s.weight;
            }
        }
    }
    for j in 1..p {
        a[(j, j)] += ridge_l2;
    }
    (a, b)
}
