//! The neural highlighter: frozen word embeddings feed a bidirectional
//! recurrent layer whose per-timestep states pass through a linear head with
//! a sigmoid, giving every token a highlight probability.
//!
//! Everything numeric is hand-derived: the forward pass, full
//! backpropagation through time over both directions, and Adam. The
//! gradient code is the module's riskiest part, so it is held to central
//! finite differences in the tests, including through the dropout path via
//! an explicit-mask entry point.
//!
//! Two cell flavors exist behind [`CellKind`]: the standard cell (sigmoid
//! gates, tanh candidate and state squashing) and a strict-sigmoid variant
//! where the candidate and state squashing are sigmoids too. Two data
//! regimes exist behind [`TaggerMode`]: `ngram` feeds whole messages,
//! `unigram` feeds every token as its own length-1 sequence, which removes
//! all context.
//!
//! Training runs in two stages: pretraining on a term lexicon (tokens of
//! medical terms labeled 1, non-medical words 0, negatives resampled each
//! epoch to a configurable token ratio) and fine-tuning on gold-annotated
//! patient messages.

use crate::corpus::{preprocess, tokenize, Conversation, Message, TermLexicon};
use crate::math::{dot, sigmoid, Mat};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Default binary-highlight threshold on predicted probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Checkpoint schema version accepted by [`load_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: expected {expected} vector components")]
    DimMismatch {
        path: String,
        line: usize,
        expected: usize,
    },
    #[error("invalid checkpoint {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("parameter shapes are inconsistent: {message}")]
    BadShape { message: String },
    #[error("invalid configuration: {message}")]
    BadConfig { message: String },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training batch contains no tokens")]
    EmptyBatch,
    #[error("training loss became non-finite")]
    NonFiniteLoss,
}

/// A word-embedding table with a mean-vector fallback for unknown words.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub oov_vector: Vec<f64>,
}

impl EmbeddingTable {
    /// Parses the text format: a `"vocab_size dim"` header, then one
    /// `"word v1 .. v_dim"` line per word. The out-of-vocabulary vector is
    /// the element-wise mean over the whole table.
    pub fn load(path: &Path) -> Result<EmbeddingTable, TaggerError> {
        let text = fs::read_to_string(path).map_err(|source| TaggerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let p = || path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| TaggerError::Format {
            path: p(),
            line: 1,
            message: "missing header".into(),
        })?;
        let mut parts = header.split_whitespace();
        let parse_header = |s: Option<&str>| -> Option<usize> { s.and_then(|v| v.parse().ok()) };
        let (vocab_size, dim) = match (
            parse_header(parts.next()),
            parse_header(parts.next()),
            parts.next(),
        ) {
            (Some(v), Some(d), None) if v >= 1 && d >= 1 => (v, d),
            _ => {
                return Err(TaggerError::Format {
                    path: p(),
                    line: 1,
                    message: "header must be \"vocab_size dim\" with both at least 1".into(),
                })
            }
        };

        let mut vectors = BTreeMap::new();
        let mut sum = vec![0.0; dim];
        for (index, line) in lines {
            let line_no = index + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line has a first field");
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TaggerError::Format {
                    path: p(),
                    line: line_no,
                    message: format!("bad number: {e}"),
                })?;
            if values.len() != dim {
                return Err(TaggerError::DimMismatch {
                    path: p(),
                    line: line_no,
                    expected: dim,
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TaggerError::Format {
                    path: p(),
                    line: line_no,
                    message: "non-finite component".into(),
                });
            }
            if vectors.insert(word.to_string(), values.clone()).is_some() {
                return Err(TaggerError::Format {
                    path: p(),
                    line: line_no,
                    message: format!("duplicate word {word:?}"),
                });
            }
            for (s, v) in sum.iter_mut().zip(&values) {
                *s += v;
            }
        }
        if vectors.len() != vocab_size {
            return Err(TaggerError::Format {
                path: p(),
                line: 1,
                message: format!(
                    "header declares {vocab_size} words but file holds {}",
                    vectors.len()
                ),
            });
        }
        let n = vectors.len() as f64;
        let oov_vector = sum.into_iter().map(|s| s / n).collect();
        Ok(EmbeddingTable {
            dim,
            vectors,
            oov_vector,
        })
    }

    pub fn lookup(&self, norm: &str) -> &[f64] {
        self.vectors
            .get(norm)
            .map(Vec::as_slice)
            .unwrap_or(&self.oov_vector)
    }

    pub fn embed(&self, norms: &[String]) -> Vec<Vec<f64>> {
        norms.iter().map(|n| self.lookup(n).to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerMode {
    Unigram,
    Ngram,
}

impl TaggerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaggerMode::Unigram => "unigram",
            TaggerMode::Ngram => "ngram",
        }
    }
}

/// Which squashing the candidate and cell state go through. `Standard` is
/// the usual tanh; `StrictSigmoid` replaces both with sigmoids (the gates
/// are sigmoids either way).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Standard,
    StrictSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub cells_per_direction: usize,
    pub dropout: f64,
    pub mode: TaggerMode,
    pub cell: CellKind,
    pub max_seq_len: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            cells_per_direction: 256,
            dropout: 0.2,
            mode: TaggerMode::Ngram,
            cell: CellKind::Standard,
            max_seq_len: 256,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.cells_per_direction < 1 {
            return Err(TaggerError::BadConfig {
                message: "cells_per_direction must be at least 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TaggerError::BadConfig {
                message: "dropout must lie in [0, 1)".into(),
            });
        }
        if self.max_seq_len < 1 {
            return Err(TaggerError::BadConfig {
                message: "max_seq_len must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// One direction's recurrent parameters. Rows of `w`/`u`/`b` stack the four
/// gates in the order input, forget, candidate, output — H rows each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionParams {
    pub w: Mat,
    pub u: Mat,
    pub b: Vec<f64>,
}

impl DirectionParams {
    fn zeros(hidden: usize, input: usize) -> DirectionParams {
        DirectionParams {
            w: Mat::zeros(4 * hidden, input),
            u: Mat::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }
}

/// Full parameter set; doubles as the gradient container since gradients
/// mirror parameter shapes exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerParams {
    pub embedding_dim: usize,
    pub forward: DirectionParams,
    pub backward: DirectionParams,
    /// Head weights over the concatenated `[forward | backward]` state.
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl TaggerParams {
    pub fn zeros(config: &TaggerConfig, embedding_dim: usize) -> TaggerParams {
        let h = config.cells_per_direction;
        TaggerParams {
            embedding_dim,
            forward: DirectionParams::zeros(h, embedding_dim),
            backward: DirectionParams::zeros(h, embedding_dim),
            head_w: vec![0.0; 2 * h],
            head_b: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.head_w.len() / 2
    }

    /// Checks internal shape consistency against a config.
    pub fn validate(&self, config: &TaggerConfig) -> Result<(), TaggerError> {
        let h = config.cells_per_direction;
        let d = self.embedding_dim;
        let bad = |message: String| Err(TaggerError::BadShape { message });
        for (name, dir) in [("forward", &self.forward), ("backward", &self.backward)] {
            if dir.w.rows != 4 * h || dir.w.cols != d {
                return bad(format!("{name}.w is {}x{}", dir.w.rows, dir.w.cols));
            }
            if dir.u.rows != 4 * h || dir.u.cols != h {
                return bad(format!("{name}.u is {}x{}", dir.u.rows, dir.u.cols));
            }
            if dir.b.len() != 4 * h {
                return bad(format!("{name}.b has length {}", dir.b.len()));
            }
        }
        if self.head_w.len() != 2 * h {
            return bad(format!("head_w has length {}", self.head_w.len()));
        }
        let finite = self.forward.w.data.iter().all(|v| v.is_finite())
            && self.forward.u.data.iter().all(|v| v.is_finite())
            && self.forward.b.iter().all(|v| v.is_finite())
            && self.backward.w.data.iter().all(|v| v.is_finite())
            && self.backward.u.data.iter().all(|v| v.is_finite())
            && self.backward.b.iter().all(|v| v.is_finite())
            && self.head_w.iter().all(|v| v.is_finite())
            && self.head_b.is_finite();
        if !finite {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }
}

/// Seeded uniform init scaled by fan-in; biases start at zero.
pub fn init_params(config: &TaggerConfig, embedding_dim: usize, seed: u64) -> TaggerParams {
    let h = config.cells_per_direction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let scale = 1.0 / (cols as f64).sqrt();
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
    };
    let direction = |rng: &mut ChaCha8Rng| DirectionParams {
        w: mat(4 * h, embedding_dim, rng),
        u: mat(4 * h, h, rng),
        b: vec![0.0; 4 * h],
    };
    let forward = direction(&mut rng);
    let backward = direction(&mut rng);
    let head_scale = 1.0 / ((2 * h) as f64).sqrt();
    let head_w = (0..2 * h)
        .map(|_| rng.random_range(-1.0..1.0) * head_scale)
        .collect();
    TaggerParams {
        embedding_dim,
        forward,
        backward,
        head_w,
        head_b: 0.0,
    }
}

/// A training sequence: per-token embedding vectors and 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Forward pass

struct DirectionTrace {
    /// Post-activation gates per step, H values each.
    i: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Squashed cell state `act(c)` per step.
    tc: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

fn cell_squash(cell: CellKind, z: f64) -> f64 {
    match cell {
        CellKind::Standard => z.tanh(),
        CellKind::StrictSigmoid => sigmoid(z),
    }
}

/// Derivative of the squashing expressed through its output value.
fn cell_squash_deriv(cell: CellKind, value: f64) -> f64 {
    match cell {
        CellKind::Standard => 1.0 - value * value,
        CellKind::StrictSigmoid => value * (1.0 - value),
    }
}

/// Runs one direction over `xs` in the given order.
fn run_direction(dir: &DirectionParams, cell: CellKind, hidden: usize, xs: &[&[f64]]) -> DirectionTrace {
    let len = xs.len();
    let mut trace = DirectionTrace {
        i: Vec::with_capacity(len),
        f: Vec::with_capacity(len),
        g: Vec::with_capacity(len),
        o: Vec::with_capacity(len),
        c: Vec::with_capacity(len),
        tc: Vec::with_capacity(len),
        h: Vec::with_capacity(len),
    };
    let mut h_prev = vec![0.0; hidden];
    let mut c_prev = vec![0.0; hidden];
    for &x in xs {
        let mut z = dir.b.clone();
        dir.w.matvec_add(x, &mut z);
        dir.u.matvec_add(&h_prev, &mut z);
        let mut i = vec![0.0; hidden];
        let mut f = vec![0.0; hidden];
        let mut g = vec![0.0; hidden];
        let mut o = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut tc = vec![0.0; hidden];
        let mut h = vec![0.0; hidden];
        for j in 0..hidden {
            i[j] = sigmoid(z[j]);
            f[j] = sigmoid(z[hidden + j]);
            g[j] = cell_squash(cell, z[2 * hidden + j]);
            o[j] = sigmoid(z[3 * hidden + j]);
            c[j] = f[j] * c_prev[j] + i[j] * g[j];
            tc[j] = cell_squash(cell, c[j]);
            h[j] = o[j] * tc[j];
        }
        h_prev.copy_from_slice(&h);
        c_prev.copy_from_slice(&c);
        trace.i.push(i);
        trace.f.push(f);
        trace.g.push(g);
        trace.o.push(o);
        trace.c.push(c);
        trace.tc.push(tc);
        trace.h.push(h);
    }
    trace
}

struct SequenceTraces {
    forward: DirectionTrace,
    backward: DirectionTrace,
}

fn run_both_directions(
    params: &TaggerParams,
    config: &TaggerConfig,
    embeddings: &[Vec<f64>],
) -> SequenceTraces {
    let hidden = config.cells_per_direction;
    let xs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
    let reversed: Vec<&[f64]> = xs.iter().rev().copied().collect();
    SequenceTraces {
        forward: run_direction(&params.forward, config.cell, hidden, &xs),
        backward: run_direction(&params.backward, config.cell, hidden, &reversed),
    }
}

/// Concatenated `[forward | backward]` state at original position `t`.
fn concat_state(traces: &SequenceTraces, t: usize, len: usize, out: &mut [f64]) {
    let hidden = traces.forward.h[t].len();
    out[..hidden].copy_from_slice(&traces.forward.h[t]);
    out[hidden..].copy_from_slice(&traces.backward.h[len - 1 - t]);
}

/// Inference forward pass: per-token probabilities, strictly inside (0,1).
/// No dropout is applied. An empty sequence yields an empty result.
pub fn forward(
    params: &TaggerParams,
    config: &TaggerConfig,
    embeddings: &[Vec<f64>],
) -> Result<Vec<f64>, TaggerError> {
    params.validate(config)?;
    if embeddings.len() > config.max_seq_len {
        return Err(TaggerError::SequenceTooLong {
            len: embeddings.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(x) = embeddings.iter().find(|x| x.len() != params.embedding_dim) {
        return Err(TaggerError::BadShape {
            message: format!(
                "embedding of width {} fed to a model of width {}",
                x.len(),
                params.embedding_dim
            ),
        });
    }
    let len = embeddings.len();
    let traces = run_both_directions(params, config, embeddings);
    let mut v = vec![0.0; 2 * config.cells_per_direction];
    Ok((0..len)
        .map(|t| {
            concat_state(&traces, t, len, &mut v);
            sigmoid(dot(&params.head_w, &v) + params.head_b)
        })
        .collect())
}

/// Scores a message's tokens. In unigram mode every token runs as its own
/// length-1 sequence. In ngram mode the whole message runs at once; messages
/// beyond `max_seq_len` are truncated with a warning and the cut-off tail
/// scores zero.
pub fn predict(
    params: &TaggerParams,
    config: &TaggerConfig,
    table: &EmbeddingTable,
    message: &Message,
) -> Vec<f64> {
    predict_tokens(params, config, table, &message.norms())
}

pub fn predict_tokens(
    params: &TaggerParams,
    config: &TaggerConfig,
    table: &EmbeddingTable,
    norms: &[String],
) -> Vec<f64> {
    match config.mode {
        TaggerMode::Unigram => norms
            .iter()
            .map(|n| {
                let embedded = vec![table.lookup(n).to_vec()];
                forward(params, config, &embedded).expect("length-1 sequence always fits")[0]
            })
            .collect(),
        TaggerMode::Ngram => {
            let mut scores = if norms.len() > config.max_seq_len {
                log::warn!(
                    "truncating a {}-token message to max_seq_len {}",
                    norms.len(),
                    config.max_seq_len
                );
                let embedded = table.embed(&norms[..config.max_seq_len]);
                forward(params, config, &embedded).expect("truncated sequence fits")
            } else {
                let embedded = table.embed(norms);
                forward(params, config, &embedded).expect("sequence fits")
            };
            scores.resize(norms.len(), 0.0);
            scores
        }
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Pre-scaled inverted-dropout masks: one factor per concatenated unit per
/// timestep per sequence, each either `0` or `1/(1-rate)`.
pub type DropoutMasks = Vec<Vec<Vec<f64>>>;

/// Draws inverted-dropout masks for a batch.
pub fn draw_dropout_masks(
    batch: &[Sequence],
    width: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> DropoutMasks {
    let keep = 1.0 - rate;
    batch
        .iter()
        .map(|seq| {
            (0..seq.embeddings.len())
                .map(|_| {
                    (0..width)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Mean binary cross-entropy over every token of the batch plus gradients
/// for all parameters, by full backpropagation through time. Embeddings are
/// frozen, so no input gradients are produced.
///
/// `masks`, when given, multiply the concatenated state before the head —
/// the explicit form of inverted dropout, exposed so the dropout path is
/// finite-difference-checkable. The clamp on the probabilities protects the
/// reported loss only; gradients flow through the raw sigmoid.
pub fn loss_and_grads_with_masks(
    params: &TaggerParams,
    config: &TaggerConfig,
    batch: &[Sequence],
    masks: Option<&DropoutMasks>,
) -> Result<(f64, TaggerParams), TaggerError> {
    params.validate(config)?;
    let hidden = config.cells_per_direction;
    let width = 2 * hidden;
    let token_total: usize = batch.iter().map(|s| s.embeddings.len()).sum();
    if token_total == 0 {
        return Err(TaggerError::EmptyBatch);
    }

    let mut loss = 0.0;
    let mut grads = TaggerParams::zeros(config, params.embedding_dim);

    for (seq_index, seq) in batch.iter().enumerate() {
        let len = seq.embeddings.len();
        if len == 0 {
            continue;
        }
        if len > config.max_seq_len {
            return Err(TaggerError::SequenceTooLong {
                len,
                max: config.max_seq_len,
            });
        }
        if seq.labels.len() != len {
            return Err(TaggerError::BadShape {
                message: format!("{} labels for {} tokens", seq.labels.len(), len),
            });
        }
        if let Some(x) = seq.embeddings.iter().find(|x| x.len() != params.embedding_dim) {
            return Err(TaggerError::BadShape {
                message: format!(
                    "embedding of width {} fed to a model of width {}",
                    x.len(),
                    params.embedding_dim
                ),
            });
        }

        let traces = run_both_directions(params, config, &seq.embeddings);

        // Head forward + backward per timestep; accumulate the state
        // gradients each direction will consume.
        let mut dh_forward = vec![vec![0.0; hidden]; len];
        let mut dh_backward = vec![vec![0.0; hidden]; len];
        let mut v = vec![0.0; width];
        for t in 0..len {
            concat_state(&traces, t, len, &mut v);
            if let Some(m) = masks {
                for (vj, &mj) in v.iter_mut().zip(&m[seq_index][t]) {
                    *vj *= mj;
                }
            }
            let logit = dot(&params.head_w, &v) + params.head_b;
            let p = sigmoid(logit);
            let y = seq.labels[t];
            let clamped = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();

            let dlogit = p - y;
            for (gw, &vj) in grads.head_w.iter_mut().zip(&v) {
                *gw += dlogit * vj;
            }
            grads.head_b += dlogit;
            // dv = dlogit * head_w, rescaled back through the mask.
            for j in 0..width {
                let mut dvj = dlogit * params.head_w[j];
                if let Some(m) = masks {
                    dvj *= m[seq_index][t][j];
                }
                if j < hidden {
                    dh_forward[t][j] += dvj;
                } else {
                    dh_backward[len - 1 - t][j - hidden] += dvj;
                }
            }
        }

        let xs: Vec<&[f64]> = seq.embeddings.iter().map(Vec::as_slice).collect();
        backprop_direction(
            &params.forward,
            &mut grads.forward,
            &traces.forward,
            config.cell,
            hidden,
            &xs,
            &dh_forward,
        );
        let reversed: Vec<&[f64]> = xs.iter().rev().copied().collect();
        backprop_direction(
            &params.backward,
            &mut grads.backward,
            &traces.backward,
            config.cell,
            hidden,
            &reversed,
            &dh_backward,
        );
    }

    let scale = 1.0 / token_total as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(TaggerError::NonFiniteLoss);
    }
    for g in grads.forward.w.data.iter_mut() {
        *g *= scale;
    }
    for g in grads.forward.u.data.iter_mut() {
        *g *= scale;
    }
    for g in grads.forward.b.iter_mut() {
        *g *= scale;
    }
    for g in grads.backward.w.data.iter_mut() {
        *g *= scale;
    }
    for g in grads.backward.u.data.iter_mut() {
        *g *= scale;
    }
    for g in grads.backward.b.iter_mut() {
        *g *= scale;
    }
    for g in grads.head_w.iter_mut() {
        *g *= scale;
    }
    grads.head_b *= scale;
    Ok((loss, grads))
}

/// Training-time entry: draws fresh dropout masks when `train` is set and
/// the configured rate is nonzero.
pub fn loss_and_grads(
    params: &TaggerParams,
    config: &TaggerConfig,
    batch: &[Sequence],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, TaggerParams), TaggerError> {
    if train && config.dropout > 0.0 {
        let masks = draw_dropout_masks(batch, 2 * config.cells_per_direction, config.dropout, rng);
        loss_and_grads_with_masks(params, config, batch, Some(&masks))
    } else {
        loss_and_grads_with_masks(params, config, batch, None)
    }
}

/// Backpropagation through time for one direction; `xs` and `dh_head` are in
/// this direction's processing order. Accumulates into `grads` unscaled.
fn backprop_direction(
    dir: &DirectionParams,
    grads: &mut DirectionParams,
    trace: &DirectionTrace,
    cell: CellKind,
    hidden: usize,
    xs: &[&[f64]],
    dh_head: &[Vec<f64>],
) {
    let len = xs.len();
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dz = vec![0.0; 4 * hidden];
    let zeros = vec![0.0; hidden];
    for t in (0..len).rev() {
        let i = &trace.i[t];
        let f = &trace.f[t];
        let g = &trace.g[t];
        let o = &trace.o[t];
        let tc = &trace.tc[t];
        let c_prev = if t > 0 { &trace.c[t - 1] } else { &zeros };
        let h_prev = if t > 0 { &trace.h[t - 1] } else { &zeros };

        for j in 0..hidden {
            let dh = dh_head[t][j] + dh_next[j];
            let do_ = dh * tc[j];
            let dtc = dh * o[j];
            let dc = dc_next[j] + dtc * cell_squash_deriv(cell, tc[j]);
            let di = dc * g[j];
            let dg = dc * i[j];
            let df = dc * c_prev[j];
            dz[j] = di * i[j] * (1.0 - i[j]);
            dz[hidden + j] = df * f[j] * (1.0 - f[j]);
            dz[2 * hidden + j] = dg * cell_squash_deriv(cell, g[j]);
            dz[3 * hidden + j] = do_ * o[j] * (1.0 - o[j]);
            dc_next[j] = dc * f[j];
        }
        grads.w.add_outer(&dz, xs[t]);
        grads.u.add_outer(&dz, h_prev);
        for (gb, &d) in grads.b.iter_mut().zip(&dz) {
            *gb += d;
        }
        for d in dh_next.iter_mut() {
            *d = 0.0;
        }
        dir.u.matvec_t_add(&dz, &mut dh_next);
    }
}

// ---------------------------------------------------------------------------
// Adam

/// Bias-corrected Adam with moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: TaggerParams,
    pub v: TaggerParams,
}

impl AdamState {
    pub fn new(config: &TaggerConfig, embedding_dim: usize, lr: f64) -> AdamState {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: TaggerParams::zeros(config, embedding_dim),
            v: TaggerParams::zeros(config, embedding_dim),
        }
    }
}

fn adam_update_slice(
    state_step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
) {
    let bc1 = 1.0 - beta1.powi(state_step as i32);
    let bc2 = 1.0 - beta2.powi(state_step as i32);
    for j in 0..p.len() {
        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut TaggerParams, grads: &TaggerParams) {
    state.step += 1;
    let (step, lr, b1, b2, eps) = (state.step, state.lr, state.beta1, state.beta2, state.eps);
    let apply = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        adam_update_slice(step, lr, b1, b2, eps, p, m, v, g);
    };
    apply(
        &mut params.forward.w.data,
        &mut state.m.forward.w.data,
        &mut state.v.forward.w.data,
        &grads.forward.w.data,
    );
    apply(
        &mut params.forward.u.data,
        &mut state.m.forward.u.data,
        &mut state.v.forward.u.data,
        &grads.forward.u.data,
    );
    apply(
        &mut params.forward.b,
        &mut state.m.forward.b,
        &mut state.v.forward.b,
        &grads.forward.b,
    );
    apply(
        &mut params.backward.w.data,
        &mut state.m.backward.w.data,
        &mut state.v.backward.w.data,
        &grads.backward.w.data,
    );
    apply(
        &mut params.backward.u.data,
        &mut state.m.backward.u.data,
        &mut state.v.backward.u.data,
        &grads.backward.u.data,
    );
    apply(
        &mut params.backward.b,
        &mut state.m.backward.b,
        &mut state.v.backward.b,
        &grads.backward.b,
    );
    apply(
        &mut params.head_w,
        &mut state.m.head_w,
        &mut state.v.head_w,
        &grads.head_w,
    );
    let mut pb = [params.head_b];
    let mut mb = [state.m.head_b];
    let mut vb = [state.v.head_b];
    adam_update_slice(step, lr, b1, b2, eps, &mut pb, &mut mb, &mut vb, &[grads.head_b]);
    params.head_b = pb[0];
    state.m.head_b = mb[0];
    state.v.head_b = vb[0];
}

// ---------------------------------------------------------------------------
// Training stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Pretraining only: non-medical to medical token ratio per epoch.
    pub negative_ratio: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            negative_ratio: 1.0,
        }
    }
}

/// Explodes sequences to length 1 in unigram mode; leaves them whole in
/// ngram mode.
fn mode_sequences(mode: TaggerMode, sequences: Vec<Sequence>) -> Vec<Sequence> {
    match mode {
        TaggerMode::Ngram => sequences,
        TaggerMode::Unigram => sequences
            .into_iter()
            .flat_map(|seq| {
                seq.embeddings
                    .into_iter()
                    .zip(seq.labels)
                    .map(|(x, y)| Sequence {
                        embeddings: vec![x],
                        labels: vec![y],
                    })
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

fn term_sequence(table: &EmbeddingTable, term: &str, label: f64) -> Option<Sequence> {
    let norms: Vec<String> = tokenize(&preprocess(term))
        .into_iter()
        .map(|t| t.norm)
        .collect();
    if norms.is_empty() {
        return None;
    }
    Some(Sequence {
        labels: vec![label; norms.len()],
        embeddings: table.embed(&norms),
    })
}

/// Builds the lexicon training pool: every token of a medical term labeled
/// 1, every non-medical term token labeled 0.
pub fn lexicon_sequences(
    table: &EmbeddingTable,
    lexicon: &TermLexicon,
) -> (Vec<Sequence>, Vec<Sequence>) {
    let medical = lexicon
        .medical_terms
        .iter()
        .filter_map(|t| term_sequence(table, t, 1.0))
        .collect();
    let non_medical = lexicon
        .non_medical_terms
        .iter()
        .filter_map(|t| term_sequence(table, t, 0.0))
        .collect();
    (medical, non_medical)
}

/// Builds fine-tuning sequences from gold-annotated patient messages.
/// In ngram mode over-long messages are truncated (labels with them) with a
/// warning; unigram sequences always fit.
pub fn finetune_sequences(
    table: &EmbeddingTable,
    conversations: &[Conversation],
    config: &TaggerConfig,
) -> Vec<Sequence> {
    let mut sequences = Vec::new();
    for conversation in conversations {
        for message in conversation.patient_messages() {
            let Some(gold) = &message.gold else { continue };
            if gold.is_empty() {
                continue;
            }
            let norms = message.norms();
            let mut labels: Vec<f64> = gold.iter().map(|&g| f64::from(g)).collect();
            let mut kept = norms;
            if config.mode == TaggerMode::Ngram && kept.len() > config.max_seq_len {
                log::warn!(
                    "truncating a {}-token training message to max_seq_len {}",
                    kept.len(),
                    config.max_seq_len
                );
                kept.truncate(config.max_seq_len);
                labels.truncate(config.max_seq_len);
            }
            sequences.push(Sequence {
                embeddings: table.embed(&kept),
                labels,
            });
        }
    }
    mode_sequences(config.mode, sequences)
}

/// One optimization pass over a fixed sequence pool: shuffle, batch, Adam.
/// Returns the mean per-token loss across the epoch's batches.
fn run_epoch(
    params: &mut TaggerParams,
    adam: &mut AdamState,
    config: &TaggerConfig,
    pool: &mut Vec<Sequence>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TaggerError> {
    pool.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut token_sum = 0usize;
    for batch in pool.chunks(batch_size.max(1)) {
        let tokens: usize = batch.iter().map(|s| s.embeddings.len()).sum();
        let (loss, grads) = loss_and_grads(params, config, batch, true, rng)?;
        adam_step(adam, params, &grads);
        loss_sum += loss * tokens as f64;
        token_sum += tokens;
    }
    if token_sum == 0 {
        return Err(TaggerError::EmptyBatch);
    }
    Ok(loss_sum / token_sum as f64)
}

/// Pretrains on the term lexicon: medical-term tokens are positives,
/// non-medical words negatives, the latter resampled each epoch (cycling
/// through a reshuffled list) to `negative_ratio` times the medical token
/// count. Returns the trained parameters and the per-epoch loss trace.
pub fn pretrain(
    table: &EmbeddingTable,
    lexicon: &TermLexicon,
    config: &TaggerConfig,
    hyper: &TrainHyper,
) -> Result<(TaggerParams, Vec<f64>), TaggerError> {
    config.validate()?;
    let (medical, non_medical) = lexicon_sequences(table, lexicon);
    let medical = mode_sequences(config.mode, medical);
    let non_medical = mode_sequences(config.mode, non_medical);
    if medical.is_empty() {
        return Err(TaggerError::EmptyBatch);
    }
    let medical_tokens: usize = medical.iter().map(|s| s.embeddings.len()).sum();
    let negative_target = (medical_tokens as f64 * hyper.negative_ratio).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = init_params(config, table.dim, hyper.seed);
    let mut adam = AdamState::new(config, table.dim, hyper.lr);

    // Cycling negative sampler: a reshuffled pass over the non-medical pool
    // whenever the previous pass runs out.
    let mut negative_order: Vec<usize> = (0..non_medical.len()).collect();
    let mut cursor = negative_order.len();
    let mut trace = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        let mut pool = medical.clone();
        if !non_medical.is_empty() {
            let mut negative_tokens = 0usize;
            while negative_tokens < negative_target {
                if cursor == negative_order.len() {
                    negative_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let seq = &non_medical[negative_order[cursor]];
                cursor += 1;
                negative_tokens += seq.embeddings.len();
                pool.push(seq.clone());
            }
        }
        trace.push(run_epoch(
            &mut params,
            &mut adam,
            config,
            &mut pool,
            hyper.batch_size,
            &mut rng,
        )?);
    }
    Ok((params, trace))
}

/// Continues training pretrained parameters on gold-annotated patient
/// messages. Returns updated parameters and the per-epoch loss trace.
pub fn finetune(
    params: &TaggerParams,
    table: &EmbeddingTable,
    conversations: &[Conversation],
    config: &TaggerConfig,
    hyper: &TrainHyper,
) -> Result<(TaggerParams, Vec<f64>), TaggerError> {
    config.validate()?;
    params.validate(config)?;
    let sequences = finetune_sequences(table, conversations, config);
    if sequences.iter().map(|s| s.embeddings.len()).sum::<usize>() == 0 {
        return Err(TaggerError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut tuned = params.clone();
    let mut adam = AdamState::new(config, params.embedding_dim, hyper.lr);
    let mut pool = sequences;
    let mut trace = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        trace.push(run_epoch(
            &mut tuned,
            &mut adam,
            config,
            &mut pool,
            hyper.batch_size,
            &mut rng,
        )?);
    }
    Ok((tuned, trace))
}

// ---------------------------------------------------------------------------
// Checkpointing

/// Versioned parameter checkpoint; the JSON round trip is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TaggerConfig,
    pub seed: u64,
    pub params: TaggerParams,
}

impl Checkpoint {
    pub fn new(config: TaggerConfig, seed: u64, params: TaggerParams) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            seed,
            params,
        }
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TaggerError> {
    let json = serde_json::to_string(checkpoint).expect("checkpoint serializes");
    fs::write(path, json).map_err(|source| TaggerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TaggerError> {
    let text = fs::read_to_string(path).map_err(|source| TaggerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|source| TaggerError::Json {
            path: path.display().to_string(),
            source,
        })?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(TaggerError::Version {
            found: checkpoint.version,
        });
    }
    checkpoint.config.validate()?;
    checkpoint.params.validate(&checkpoint.config)?;
    Ok(checkpoint)
}
