//! Python bindings for the medmark toolkit.
//!
//! Exposes the text pipeline (preprocess/tokenize), the agreement and
//! ranking metrics, and the three highlighter families as Python classes.
//! Scores come back as `(surface, score)` pairs so callers never have to
//! re-tokenize; training heavy models and batch evaluation stay with the
//! `medmark` command line tool.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use medmark_core::classify::{train, FeatureSpace, LossKind, TrainConfig, TrainedClassifier};
use medmark_core::corpus::{load_dataset, AnnotationSet, DatasetKind, Message, Role};
use medmark_core::pipeline::explain_message;
use medmark_core::tagger::{load_checkpoint, EmbeddingTable, TaggerConfig, TaggerParams};
use medmark_core::tfidf::TfidfModel as CoreTfidfModel;
use medmark_core::{eval, lime, tagger, tfidf};

fn value_err(error: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(error.to_string())
}

fn patient_message(text: &str) -> PyResult<Message> {
    Message::new(Role::Patient, text, None).map_err(value_err)
}

fn paired(message: &Message, scores: Vec<f64>) -> Vec<(String, f64)> {
    message
        .tokens
        .iter()
        .map(|t| t.surface.clone())
        .zip(scores)
        .collect()
}

/// Normalizes raw text the way every model does before tokenizing:
/// lowercase, line-break runs to one space, control characters dropped,
/// URL runs removed.
#[pyfunction]
fn preprocess(text: &str) -> String {
    medmark_core::corpus::preprocess(text)
}

/// Splits text into `(surface, norm, start, end)` tuples with byte spans
/// into the input.
#[pyfunction]
fn tokenize(text: &str) -> Vec<(String, String, usize, usize)> {
    medmark_core::corpus::tokenize(text)
        .into_iter()
        .map(|t| (t.surface, t.norm, t.span.0, t.span.1))
        .collect()
}

/// Area under the ROC curve for 0/1 labels (ties get half credit).
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(value_err)
}

/// Average precision over the ranked scores.
#[pyfunction]
fn pr_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::pr_auc(&scores, &labels).map_err(value_err)
}

/// Precision and recall at a fixed score threshold.
#[pyfunction]
fn precision_recall_at(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<(f64, f64)> {
    eval::precision_recall_at(&scores, &labels, threshold).map_err(value_err)
}

/// Krippendorff's alpha for binary ratings; rows are annotators, entries
/// are 0, 1 or None for a missing rating.
#[pyfunction]
fn krippendorff_alpha(rows: Vec<Vec<Option<u8>>>) -> PyResult<f64> {
    let annotations = AnnotationSet::new(rows).map_err(value_err)?;
    eval::krippendorff_alpha(&annotations).map_err(value_err)
}

/// TF-IDF n-gram highlighter fitted over whole conversations.
#[pyclass(name = "TfidfModel")]
struct PyTfidfModel {
    inner: CoreTfidfModel,
}

#[pymethods]
impl PyTfidfModel {
    /// Fits document frequencies on a JSON-lines dataset.
    #[staticmethod]
    fn fit(dataset: &str) -> PyResult<Self> {
        let conversations =
            load_dataset(Path::new(dataset), DatasetKind::Plain).map_err(value_err)?;
        let inner = CoreTfidfModel::fit(&conversations).map_err(value_err)?;
        Ok(PyTfidfModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = CoreTfidfModel::load(Path::new(path)).map_err(value_err)?;
        Ok(PyTfidfModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(value_err)
    }

    /// Scores one message; each token gets the best normalized score among
    /// the n-grams covering it.
    fn highlight(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        let message = patient_message(text)?;
        let scores = self.inner.highlight_scores(&message);
        Ok(paired(&message, scores))
    }

    #[classattr]
    fn default_threshold() -> f64 {
        tfidf::DEFAULT_THRESHOLD
    }

    fn __repr__(&self) -> String {
        format!(
            "TfidfModel(documents={}, ngrams={})",
            self.inner.doc_count,
            self.inner.df.len()
        )
    }
}

/// Issue-category classifier over TF-IDF features, explained with LIME.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: TrainedClassifier,
}

impl PyClassifier {
    fn lime_config(n_samples: usize, kernel_width: f64, ridge_l2: f64, seed: u64) -> lime::LimeConfig {
        lime::LimeConfig {
            n_samples,
            kernel_width,
            ridge_l2,
            seed,
        }
    }
}

#[pymethods]
impl PyClassifier {
    /// Trains one-vs-rest heads on a dataset whose conversations all carry
    /// an issue category.
    #[staticmethod]
    #[pyo3(signature = (dataset, loss="logistic", epochs=300, learning_rate=0.5, l2=1e-4, seed=0))]
    fn train(
        dataset: &str,
        loss: &str,
        epochs: usize,
        learning_rate: f64,
        l2: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let loss = match loss {
            "logistic" => LossKind::Logistic,
            "hinge" => LossKind::Hinge,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown loss {other:?}; use \"logistic\" or \"hinge\""
                )))
            }
        };
        let conversations =
            load_dataset(Path::new(dataset), DatasetKind::Classification).map_err(value_err)?;
        let tfidf = CoreTfidfModel::fit(&conversations).map_err(value_err)?;
        let space = FeatureSpace::from_model(tfidf);
        let config = TrainConfig {
            loss,
            l2,
            learning_rate,
            epochs,
            seed,
        };
        let fit = train(&space, &conversations, &config).map_err(value_err)?;
        Ok(PyClassifier {
            inner: TrainedClassifier {
                space,
                model: fit.model,
            },
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = TrainedClassifier::load(Path::new(path)).map_err(value_err)?;
        Ok(PyClassifier { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(value_err)
    }

    /// Predicted issue category for one message.
    fn predict(&self, text: &str) -> PyResult<String> {
        let message = patient_message(text)?;
        let conversation = medmark_core::corpus::Conversation {
            id: String::new(),
            issue_category: None,
            messages: vec![message],
        };
        Ok(self.inner.predict(&conversation).as_str().to_string())
    }

    /// Per-category probabilities for one message.
    fn predict_proba(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        let message = patient_message(text)?;
        let probabilities = self.inner.predict_proba_tokens(&message.norms());
        Ok(self
            .inner
            .model
            .classes
            .iter()
            .map(|c| c.as_str().to_string())
            .zip(probabilities)
            .collect())
    }

    /// LIME explanation of the top predicted class: a dict with the target
    /// class, per-word weights, intercept and surrogate fit quality.
    #[pyo3(signature = (text, n_samples=5000, kernel_width=0.75, ridge_l2=1.0, seed=0))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        n_samples: usize,
        kernel_width: f64,
        ridge_l2: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let message = patient_message(text)?;
        let config = Self::lime_config(n_samples, kernel_width, ridge_l2, seed);
        let explanation = explain_message(&self.inner, &message, &config).map_err(value_err)?;
        let result = PyDict::new(py);
        result.set_item("target_class", explanation.target_class.as_str())?;
        result.set_item("word_weights", paired(&message, explanation.word_weights))?;
        result.set_item("intercept", explanation.intercept)?;
        result.set_item("fidelity_r2", explanation.fidelity_r2)?;
        Ok(result)
    }

    /// Highlight scores from the LIME explanation: positive evidence for
    /// the predicted class, negative weights clipped to zero.
    #[pyo3(signature = (text, n_samples=5000, kernel_width=0.75, ridge_l2=1.0, seed=0))]
    fn highlight(
        &self,
        text: &str,
        n_samples: usize,
        kernel_width: f64,
        ridge_l2: f64,
        seed: u64,
    ) -> PyResult<Vec<(String, f64)>> {
        let message = patient_message(text)?;
        let config = Self::lime_config(n_samples, kernel_width, ridge_l2, seed);
        let explanation = explain_message(&self.inner, &message, &config).map_err(value_err)?;
        let scores = lime::highlight_scores_from_explanation(&explanation);
        Ok(paired(&message, scores))
    }

    #[getter]
    fn loss(&self) -> &'static str {
        self.inner.model.loss.as_str()
    }

    #[classattr]
    fn default_threshold() -> f64 {
        lime::DEFAULT_THRESHOLD
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier(loss={}, classes={})",
            self.inner.model.loss.as_str(),
            self.inner.model.classes.len()
        )
    }
}

/// Bidirectional recurrent tagger restored from a training checkpoint.
#[pyclass(name = "Tagger")]
struct PyTagger {
    params: TaggerParams,
    config: TaggerConfig,
    table: EmbeddingTable,
}

#[pymethods]
impl PyTagger {
    #[staticmethod]
    fn load(checkpoint: &str, embeddings: &str) -> PyResult<Self> {
        let checkpoint = load_checkpoint(Path::new(checkpoint)).map_err(value_err)?;
        let table = EmbeddingTable::load(Path::new(embeddings)).map_err(value_err)?;
        if table.dim != checkpoint.params.embedding_dim {
            return Err(PyValueError::new_err(format!(
                "embeddings are {}-dimensional but the checkpoint expects {}",
                table.dim, checkpoint.params.embedding_dim
            )));
        }
        Ok(PyTagger {
            params: checkpoint.params,
            config: checkpoint.config,
            table,
        })
    }

    /// Per-token highlight probabilities for one message.
    fn highlight(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        let message = patient_message(text)?;
        let scores = tagger::predict(&self.params, &self.config, &self.table, &message);
        Ok(paired(&message, scores))
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.config.mode.as_str()
    }

    #[classattr]
    fn default_threshold() -> f64 {
        tagger::DEFAULT_THRESHOLD
    }

    fn __repr__(&self) -> String {
        format!(
            "Tagger(mode={}, cells_per_direction={})",
            self.config.mode.as_str(),
            self.config.cells_per_direction
        )
    }
}

#[pymodule]
fn medmark(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_at, m)?)?;
    m.add_function(wrap_pyfunction!(krippendorff_alpha, m)?)?;
    m.add_class::<PyTfidfModel>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyTagger>()?;
    Ok(())
}
