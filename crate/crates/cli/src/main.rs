//! `medmark` — command line front end for the highlighting toolkit.
//!
//! The subcommands cover the full workflow: dataset validation (`ingest`),
//! model training (`train`, `pretrain`, `finetune`), scoring (`highlight`,
//! `explain`), experiments (`evaluate`, `curve`, `agreement`), HTML rendering
//! (`report`) and synthetic benchmark generation (`synth`).
//!
//! Every run logs its fully resolved configuration — flags, config-file
//! values, defaults and seeds — to stderr, so any output can be reproduced
//! from the log alone. Flags win over config-file keys, which win over
//! built-in defaults; relative paths resolve against `--data-root`.
//!
//! Exit codes: 2 for usage errors (bad flags, missing required inputs),
//! 1 for data or model errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use medmark_core::classify::{
    evaluate_classifier, train, FeatureSpace, LossKind, TrainConfig, TrainedClassifier,
};
use medmark_core::corpus::{
    load_dataset, load_term_lexicon, AnnotationSet, Conversation, DatasetKind, Role,
};
use medmark_core::eval::{
    evaluate_model, krippendorff_alpha, learning_curve, CurveOptions, Highlighter, MetricsReport,
};
use medmark_core::lime::LimeConfig;
use medmark_core::pipeline::{
    explain_message, LimeHighlighter, ModelKind, TaggerHighlighter, TfidfHighlighter,
};
use medmark_core::report::{load_redaction_rules, redact, render_html};
use medmark_core::synthetic::{generate, write_benchmark, SyntheticOptions};
use medmark_core::tagger::{
    finetune, load_checkpoint, pretrain, save_checkpoint, CellKind, Checkpoint, EmbeddingTable,
    TaggerConfig, TaggerMode, TrainHyper,
};
use medmark_core::tfidf::TfidfModel;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "medmark", version, about = "Word-level medical text highlighting toolkit")]
struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    data_root: PathBuf,
    /// TOML config file; keys mirror the flag names (underscored) and fill
    /// in any flag left unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and print summary statistics.
    Ingest(IngestArgs),
    /// Train a model and write it to disk.
    Train(TrainArgs),
    /// Pretrain a model on the term lexicon alone.
    Pretrain(PretrainArgs),
    /// Continue training a pretrained model on gold highlights.
    Finetune(FinetuneArgs),
    /// Score a dataset with a trained model.
    Highlight(HighlightArgs),
    /// Explain a conversation's category with a local surrogate model.
    Explain(ExplainArgs),
    /// Train all five models and report their test metrics as CSV.
    Evaluate(EvaluateArgs),
    /// Learning-curve experiment: PR-AUC against fine-tuning set size.
    Curve(CurveArgs),
    /// Krippendorff's alpha over two or more annotator copies of a dataset.
    Agreement(AgreementArgs),
    /// Render one conversation as a highlighted HTML page.
    Report(ReportArgs),
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
}

// ---------------------------------------------------------------------------
// Argument structs. Every tunable is optional so the config file can supply
// it; resolution and defaulting happen in the run_* functions.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Highlighting,
    Classification,
    Plain,
}

impl KindArg {
    fn as_str(self) -> &'static str {
        match self {
            KindArg::Highlighting => "highlighting",
            KindArg::Classification => "classification",
            KindArg::Plain => "plain",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Logistic,
    Hinge,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Unigram,
    Ngram,
}

impl ModeArg {
    fn as_str(self) -> &'static str {
        match self {
            ModeArg::Unigram => "unigram",
            ModeArg::Ngram => "ngram",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CellArg {
    Standard,
    StrictSigmoid,
}

impl CellArg {
    fn as_str(self) -> &'static str {
        match self {
            CellArg::Standard => "standard",
            CellArg::StrictSigmoid => "strict_sigmoid",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Tfidf,
    #[value(name = "lr+lime")]
    LrLime,
    #[value(name = "svm+lime")]
    SvmLime,
    #[value(name = "unigram-tagger")]
    UnigramTagger,
    #[value(name = "ngram-tagger")]
    NgramTagger,
}

impl ModelArg {
    fn kind(self) -> ModelKind {
        match self {
            ModelArg::Tfidf => ModelKind::Tfidf,
            ModelArg::LrLime => ModelKind::LrLime,
            ModelArg::SvmLime => ModelKind::SvmLime,
            ModelArg::UnigramTagger => ModelKind::UnigramTagger,
            ModelArg::NgramTagger => ModelKind::NgramTagger,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CurveModeArg {
    Unigram,
    Ngram,
    Both,
}

impl CurveModeArg {
    fn as_str(self) -> &'static str {
        match self {
            CurveModeArg::Unigram => "unigram",
            CurveModeArg::Ngram => "ngram",
            CurveModeArg::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Tsv,
    Html,
}

impl FormatArg {
    fn as_str(self) -> &'static str {
        match self {
            FormatArg::Json => "json",
            FormatArg::Tsv => "tsv",
            FormatArg::Html => "html",
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset to validate (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation profile [default: highlighting].
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Redaction rule file; writes a redacted copy of the dataset to --out.
    #[arg(long, requires = "out")]
    redact: Option<PathBuf>,
    /// Destination of the redacted copy.
    #[arg(long, requires = "redact")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(subcommand)]
    model: TrainModel,
}

#[derive(Subcommand)]
enum TrainModel {
    /// Fit the TF-IDF highlighter on a corpus.
    Tfidf(TrainTfidfArgs),
    /// Train the issue-category classifier the explainer runs on.
    Classifier(TrainClassifierArgs),
    /// Pretrain and fine-tune the recurrent tagger in one run.
    Tagger(TrainTaggerArgs),
}

#[derive(Args)]
struct TrainTfidfArgs {
    /// Training corpus (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where the fitted model goes (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Training corpus; every conversation needs an issue category.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Loss for the linear heads [default: logistic].
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// L2 regularization strength [default: 1e-4].
    #[arg(long)]
    l2: Option<f64>,
    /// Gradient-descent step size [default: 0.5].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Full-batch epochs [default: 300].
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for parameter initialization [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Where the trained classifier goes (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Architecture flags shared by every tagger-training subcommand.
#[derive(Args)]
struct TaggerShapeArgs {
    /// LSTM cells per direction [default: 256].
    #[arg(long)]
    hidden: Option<usize>,
    /// Dropout rate on the concatenated state [default: 0.2].
    #[arg(long)]
    dropout: Option<f64>,
    /// Cell variant [default: standard].
    #[arg(long, value_enum)]
    cell: Option<CellArg>,
    /// Longest accepted token sequence [default: 256].
    #[arg(long)]
    max_seq_len: Option<usize>,
}

/// Optimizer flags shared by every tagger-training subcommand.
#[derive(Args)]
struct TaggerOptimArgs {
    /// Mini-batch size [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for init, shuffling and dropout [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainTaggerArgs {
    /// Medical term list, one term per line.
    #[arg(long)]
    medical_terms: Option<PathBuf>,
    /// Non-medical term list, one term per line.
    #[arg(long)]
    non_medical_terms: Option<PathBuf>,
    /// Word embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Gold-highlighted corpus to fine-tune on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence mode [default: ngram].
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    shape: TaggerShapeArgs,
    #[command(flatten)]
    optim: TaggerOptimArgs,
    /// Lexicon pretraining epochs [default: 10].
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Fine-tuning epochs [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampled non-medical terms per medical token [default: 1].
    #[arg(long)]
    negative_ratio: Option<f64>,
    /// Where the checkpoint goes (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(subcommand)]
    model: PretrainModel,
}

#[derive(Subcommand)]
enum PretrainModel {
    /// Pretrain the recurrent tagger as a lexicon term classifier.
    Tagger(PretrainTaggerArgs),
}

#[derive(Args)]
struct PretrainTaggerArgs {
    /// Medical term list, one term per line.
    #[arg(long)]
    medical_terms: Option<PathBuf>,
    /// Non-medical term list, one term per line.
    #[arg(long)]
    non_medical_terms: Option<PathBuf>,
    /// Word embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Sequence mode [default: ngram].
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    shape: TaggerShapeArgs,
    #[command(flatten)]
    optim: TaggerOptimArgs,
    /// Pretraining epochs [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampled non-medical terms per medical token [default: 1].
    #[arg(long)]
    negative_ratio: Option<f64>,
    /// Where the checkpoint goes (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(subcommand)]
    model: FinetuneModel,
}

#[derive(Subcommand)]
enum FinetuneModel {
    /// Fine-tune a pretrained tagger checkpoint on gold highlights.
    Tagger(FinetuneTaggerArgs),
}

#[derive(Args)]
struct FinetuneTaggerArgs {
    /// Checkpoint to start from; its architecture is kept as-is.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Word embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Gold-highlighted corpus to fine-tune on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    optim: TaggerOptimArgs,
    /// Fine-tuning epochs [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Where the fine-tuned checkpoint goes (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HighlightArgs {
    /// Model family the file holds.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Trained model file: TF-IDF JSON, classifier JSON or tagger checkpoint.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Word embedding table (taggers only).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Dataset to score.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Restrict output to one conversation id.
    #[arg(long)]
    chat: Option<String>,
    /// Output format [default: json]; html needs a single conversation.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Decision threshold [default: the model family's standard value].
    #[arg(long)]
    threshold: Option<f64>,
    /// Surrogate sample count for the explainer models [default: 5000].
    #[arg(long)]
    lime_samples: Option<usize>,
    /// Proximity kernel width for the explainer models [default: 0.75].
    #[arg(long)]
    kernel_width: Option<f64>,
    /// Ridge strength of the local surrogate [default: 1].
    #[arg(long)]
    ridge: Option<f64>,
    /// Seed for the explainer's perturbation sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Trained classifier file (JSON).
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Dataset holding the conversation.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Conversation id to explain.
    #[arg(long)]
    chat: Option<String>,
    /// Explain only this message index; default is every patient message.
    #[arg(long)]
    message: Option<usize>,
    /// Surrogate sample count [default: 5000].
    #[arg(long)]
    lime_samples: Option<usize>,
    /// Proximity kernel width [default: 0.75].
    #[arg(long)]
    kernel_width: Option<f64>,
    /// Ridge strength of the local surrogate [default: 1].
    #[arg(long)]
    ridge: Option<f64>,
    /// Seed for perturbation sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Training split (gold highlights and issue categories required).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out split the metrics are computed on.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Medical term list.
    #[arg(long)]
    medical_terms: Option<PathBuf>,
    /// Non-medical term list.
    #[arg(long)]
    non_medical_terms: Option<PathBuf>,
    /// Word embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// TF-IDF decision threshold [default: 0.01].
    #[arg(long)]
    tfidf_threshold: Option<f64>,
    /// Explainer decision threshold [default: 0.005].
    #[arg(long)]
    lime_threshold: Option<f64>,
    /// Tagger decision threshold [default: 0.5].
    #[arg(long)]
    tagger_threshold: Option<f64>,
    /// Surrogate sample count per explained message [default: 5000].
    #[arg(long)]
    lime_samples: Option<usize>,
    /// Proximity kernel width [default: 0.75].
    #[arg(long)]
    kernel_width: Option<f64>,
    /// Ridge strength of the local surrogate [default: 1].
    #[arg(long)]
    ridge: Option<f64>,
    /// Classifier epochs [default: 300].
    #[arg(long)]
    classifier_epochs: Option<usize>,
    /// Classifier learning rate [default: 0.5].
    #[arg(long)]
    classifier_lr: Option<f64>,
    /// Classifier L2 strength [default: 1e-4].
    #[arg(long)]
    classifier_l2: Option<f64>,
    #[command(flatten)]
    shape: TaggerShapeArgs,
    #[command(flatten)]
    optim: TaggerOptimArgs,
    /// Tagger pretraining epochs [default: 10].
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Tagger fine-tuning epochs [default: 10].
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Sampled non-medical terms per medical token [default: 1].
    #[arg(long)]
    negative_ratio: Option<f64>,
    /// CSV output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// Training split the fine-tuning subsets are drawn from.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out split each point is scored on.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Medical term list.
    #[arg(long)]
    medical_terms: Option<PathBuf>,
    /// Non-medical term list.
    #[arg(long)]
    non_medical_terms: Option<PathBuf>,
    /// Word embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Which tagger modes to trace [default: both].
    #[arg(long, value_enum)]
    mode: Option<CurveModeArg>,
    /// Training-set size increment between points [default: 10].
    #[arg(long)]
    step: Option<usize>,
    /// Largest training-set size [default: the full training split].
    #[arg(long)]
    max: Option<usize>,
    /// Nested subsets (each point extends the previous) [default: true].
    #[arg(long)]
    nested: Option<bool>,
    #[command(flatten)]
    shape: TaggerShapeArgs,
    #[command(flatten)]
    optim: TaggerOptimArgs,
    /// Tagger pretraining epochs [default: 10].
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Fine-tuning epochs per curve point [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampled non-medical terms per medical token [default: 1].
    #[arg(long)]
    negative_ratio: Option<f64>,
    /// CSV output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AgreementArgs {
    /// Two or more per-annotator copies of the same dataset. The first file
    /// defines the token universe; the others may omit whole conversations.
    #[arg(value_name = "DATASET", num_args = 2..)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Dataset holding the conversation (gold is used when present).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scores file produced by `highlight --format json`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Conversation id to render; defaults to a single-conversation dataset.
    #[arg(long)]
    chat: Option<String>,
    /// Decision threshold [default: the value recorded in the scores file].
    #[arg(long)]
    threshold: Option<f64>,
    /// Ignore gold labels and paint everything above threshold as a match.
    #[arg(long)]
    plain: bool,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Training conversations to generate [default: 300].
    #[arg(long)]
    train_chats: Option<usize>,
    /// Held-out conversations to generate [default: 50].
    #[arg(long)]
    test_chats: Option<usize>,
    /// Embedding dimensionality [default: 16].
    #[arg(long)]
    dim: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the benchmark files are written into.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Option resolution and config logging.
// ---------------------------------------------------------------------------

/// A usage-level failure: something the invocation itself got wrong, as
/// opposed to bad data or a failing model. Mapped to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(message.into()))
}

fn join_root(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Layered lookup: flag value, then config-file key, then default. Every
/// resolved value is recorded and logged by [`Resolver::finish`], which makes
/// the stderr log a complete recipe for reproducing the run.
struct Resolver {
    root: PathBuf,
    file: toml::Table,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    fn new(root: &Path, config: Option<&Path>) -> Result<Resolver> {
        let file = match config {
            None => toml::Table::new(),
            Some(rel) => {
                let path = join_root(root, rel);
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
        };
        Ok(Resolver {
            root: root.to_path_buf(),
            file,
            resolved: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl fmt::Display) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    fn file_value(&self, key: &str) -> Option<&toml::Value> {
        self.file.get(key)
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key) {
                Some(toml::Value::Float(f)) => *f,
                Some(toml::Value::Integer(i)) => *i as f64,
                Some(other) => bail!("config key {key:?} is not a number: {other}"),
                None => default,
            },
        };
        self.record(key, value);
        Ok(value)
    }

    fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> Result<usize> {
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key) {
                Some(toml::Value::Integer(i)) if *i >= 0 => *i as usize,
                Some(other) => bail!("config key {key:?} is not a non-negative integer: {other}"),
                None => default,
            },
        };
        self.record(key, value);
        Ok(value)
    }

    fn u64(&mut self, key: &str, flag: Option<u64>, default: u64) -> Result<u64> {
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key) {
                Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
                Some(other) => bail!("config key {key:?} is not a non-negative integer: {other}"),
                None => default,
            },
        };
        self.record(key, value);
        Ok(value)
    }

    fn bool(&mut self, key: &str, flag: Option<bool>, default: bool) -> Result<bool> {
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key) {
                Some(toml::Value::Boolean(b)) => *b,
                Some(other) => bail!("config key {key:?} is not a boolean: {other}"),
                None => default,
            },
        };
        self.record(key, value);
        Ok(value)
    }

    fn string(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<String> {
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key) {
                Some(toml::Value::String(s)) => s.clone(),
                Some(other) => bail!("config key {key:?} is not a string: {other}"),
                None => default.to_string(),
            },
        };
        self.record(key, value.clone());
        Ok(value)
    }

    /// A path the command cannot run without.
    fn path(&mut self, key: &str, flag: Option<&Path>) -> Result<PathBuf> {
        match self.opt_path(key, flag)? {
            Some(path) => Ok(path),
            None => Err(usage(format!(
                "missing required path: pass --{} or set {key:?} in the config file",
                key.replace('_', "-")
            ))),
        }
    }

    fn opt_path(&mut self, key: &str, flag: Option<&Path>) -> Result<Option<PathBuf>> {
        let rel: Option<PathBuf> = match flag {
            Some(p) => Some(p.to_path_buf()),
            None => match self.file_value(key) {
                Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
                Some(other) => bail!("config key {key:?} is not a path string: {other}"),
                None => None,
            },
        };
        match rel {
            Some(rel) => {
                let full = join_root(&self.root, &rel);
                self.record(key, full.display());
                Ok(Some(full))
            }
            None => Ok(None),
        }
    }

    fn dataset_kind(&mut self, flag: Option<KindArg>, default: KindArg) -> Result<DatasetKind> {
        let s = self.string("kind", flag.map(|k| k.as_str().to_string()), default.as_str())?;
        match s.as_str() {
            "highlighting" => Ok(DatasetKind::Highlighting),
            "classification" => Ok(DatasetKind::Classification),
            "plain" => Ok(DatasetKind::Plain),
            other => Err(usage(format!("unknown dataset kind {other:?}"))),
        }
    }

    fn loss_kind(&mut self, flag: Option<LossArg>) -> Result<LossKind> {
        let flag = flag.map(|l| match l {
            LossArg::Logistic => "logistic".to_string(),
            LossArg::Hinge => "hinge".to_string(),
        });
        let s = self.string("loss", flag, "logistic")?;
        match s.as_str() {
            "logistic" => Ok(LossKind::Logistic),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(usage(format!("unknown loss {other:?}"))),
        }
    }

    fn tagger_mode(&mut self, flag: Option<ModeArg>) -> Result<TaggerMode> {
        let s = self.string("mode", flag.map(|m| m.as_str().to_string()), "ngram")?;
        match s.as_str() {
            "unigram" => Ok(TaggerMode::Unigram),
            "ngram" => Ok(TaggerMode::Ngram),
            other => Err(usage(format!("unknown tagger mode {other:?}"))),
        }
    }

    fn cell_kind(&mut self, flag: Option<CellArg>) -> Result<CellKind> {
        let s = self.string("cell", flag.map(|c| c.as_str().to_string()), "standard")?;
        match s.as_str() {
            "standard" => Ok(CellKind::Standard),
            "strict_sigmoid" | "strict-sigmoid" => Ok(CellKind::StrictSigmoid),
            other => Err(usage(format!("unknown cell kind {other:?}"))),
        }
    }

    /// Tagger architecture from the shared shape flags.
    fn tagger_config(&mut self, mode: Option<ModeArg>, shape: &TaggerShapeArgs) -> Result<TaggerConfig> {
        let defaults = TaggerConfig::default();
        let mode = self.tagger_mode(mode)?;
        Ok(TaggerConfig {
            cells_per_direction: self.usize("hidden", shape.hidden, defaults.cells_per_direction)?,
            dropout: self.f64("dropout", shape.dropout, defaults.dropout)?,
            mode,
            cell: self.cell_kind(shape.cell)?,
            max_seq_len: self.usize("max_seq_len", shape.max_seq_len, defaults.max_seq_len)?,
        })
    }

    /// Logs the whole resolved configuration; call once per run, after the
    /// last lookup.
    fn finish(self, command: &str) {
        log::info!("command = {command}");
        log::info!("data_root = {}", self.root.display());
        for (key, value) in &self.resolved {
            log::info!("{key} = {value}");
        }
    }
}

// ---------------------------------------------------------------------------
// Scores file: the JSON interchange format between highlight and report.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScoresFile {
    model: String,
    threshold: f64,
    conversations: Vec<ScoredConversation>,
}

#[derive(Serialize, Deserialize)]
struct ScoredConversation {
    id: String,
    messages: Vec<ScoredMessage>,
}

#[derive(Serialize, Deserialize)]
struct ScoredMessage {
    role: String,
    /// One score per token; absent for unscored (doctor) messages.
    scores: Option<Vec<f64>>,
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::Patient => "patient",
        Role::Doctor => "doctor",
    }
}

// ---------------------------------------------------------------------------
// Entry point and dispatch.
// ---------------------------------------------------------------------------

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let code = if err.is::<Usage>() { 2 } else { 1 };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    let resolver = Resolver::new(&cli.data_root, cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(args) => run_ingest(resolver, args),
        Command::Train(args) => match args.model {
            TrainModel::Tfidf(args) => run_train_tfidf(resolver, args),
            TrainModel::Classifier(args) => run_train_classifier(resolver, args),
            TrainModel::Tagger(args) => run_train_tagger(resolver, args),
        },
        Command::Pretrain(args) => match args.model {
            PretrainModel::Tagger(args) => run_pretrain_tagger(resolver, args),
        },
        Command::Finetune(args) => match args.model {
            FinetuneModel::Tagger(args) => run_finetune_tagger(resolver, args),
        },
        Command::Highlight(args) => run_highlight(resolver, args),
        Command::Explain(args) => run_explain(resolver, args),
        Command::Evaluate(args) => run_evaluate(resolver, args),
        Command::Curve(args) => run_curve(resolver, args),
        Command::Agreement(args) => run_agreement(resolver, args),
        Command::Report(args) => run_report(resolver, args),
        Command::Synth(args) => run_synth(resolver, args),
    }
}

/// Writes `content` to `path`, or to stdout when no path is given.
fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))
            .map(|_| log::info!("wrote {}", path.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run_ingest(mut r: Resolver, args: IngestArgs) -> Result<()> {
    let data = r.path("data", args.data.as_deref())?;
    let kind = r.dataset_kind(args.kind, KindArg::Highlighting)?;
    let rules_path = r.opt_path("redact", args.redact.as_deref())?;
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("ingest");

    let conversations = load_dataset(&data, kind)?;
    let mut messages = 0usize;
    let mut patient_messages = 0usize;
    let mut tokens = 0usize;
    let mut gold_tokens = 0usize;
    let mut gold_highlights = 0usize;
    let mut categories: BTreeMap<&str, usize> = BTreeMap::new();
    let mut uncategorized = 0usize;
    for conversation in &conversations {
        match conversation.issue_category {
            Some(cat) => *categories.entry(cat.as_str()).or_insert(0) += 1,
            None => uncategorized += 1,
        }
        for message in &conversation.messages {
            messages += 1;
            tokens += message.tokens.len();
            if message.role == Role::Patient {
                patient_messages += 1;
            }
            if let Some(gold) = &message.gold {
                gold_tokens += gold.len();
                gold_highlights += gold.iter().filter(|&&v| v == 1).count();
            }
        }
    }
    println!("conversations = {}", conversations.len());
    println!("messages = {messages}");
    println!("patient_messages = {patient_messages}");
    println!("tokens = {tokens}");
    println!("gold_labeled_tokens = {gold_tokens}");
    println!("gold_highlights = {gold_highlights}");
    for (category, count) in &categories {
        println!("category {category} = {count}");
    }
    println!("uncategorized = {uncategorized}");

    match (rules_path, out) {
        (Some(rules_path), Some(out)) => {
            let rules = load_redaction_rules(&rules_path)?;
            write_redacted_copy(&out, &conversations, &rules)?;
            println!("redacted_copy = {}", out.display());
        }
        (None, None) => {}
        _ => return Err(usage("--redact and --out must be given together".to_string())),
    }
    Ok(())
}

/// Redacted datasets drop gold labels: redaction can change the token
/// stream, which would silently misalign them.
fn write_redacted_copy(
    out: &Path,
    conversations: &[Conversation],
    rules: &[medmark_core::report::RedactionRule],
) -> Result<()> {
    #[derive(Serialize)]
    struct OutMessage<'a> {
        role: &'a str,
        text: String,
    }
    #[derive(Serialize)]
    struct OutConversation<'a> {
        id: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        issue_category: Option<&'a str>,
        messages: Vec<OutMessage<'a>>,
    }

    if conversations
        .iter()
        .flat_map(|c| &c.messages)
        .any(|m| m.gold.is_some())
    {
        log::warn!("gold labels are dropped from the redacted copy");
    }
    let mut lines = String::new();
    for conversation in conversations {
        let mut messages = Vec::with_capacity(conversation.messages.len());
        for message in &conversation.messages {
            messages.push(OutMessage {
                role: role_str(message.role),
                text: redact(&message.raw_text, rules)?,
            });
        }
        let record = OutConversation {
            id: &conversation.id,
            issue_category: conversation.issue_category.map(|c| c.as_str()),
            messages,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    fs::write(out, lines).with_context(|| format!("writing {}", out.display()))
}

fn run_train_tfidf(mut r: Resolver, args: TrainTfidfArgs) -> Result<()> {
    let data = r.path("data", args.data.as_deref())?;
    let out = r.path("out", args.out.as_deref())?;
    r.finish("train tfidf");

    let conversations = load_dataset(&data, DatasetKind::Plain)?;
    let model = TfidfModel::fit(&conversations)?;
    model.save(&out)?;
    println!("documents = {}", conversations.len());
    println!("model = {}", out.display());
    Ok(())
}

fn run_train_classifier(mut r: Resolver, args: TrainClassifierArgs) -> Result<()> {
    let data = r.path("data", args.data.as_deref())?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        loss: r.loss_kind(args.loss)?,
        l2: r.f64("l2", args.l2, defaults.l2)?,
        learning_rate: r.f64("learning_rate", args.learning_rate, defaults.learning_rate)?,
        epochs: r.usize("epochs", args.epochs, defaults.epochs)?,
        seed: r.u64("seed", args.seed, defaults.seed)?,
    };
    let out = r.path("out", args.out.as_deref())?;
    r.finish("train classifier");

    let conversations = load_dataset(&data, DatasetKind::Classification)?;
    let tfidf = TfidfModel::fit(&conversations)?;
    let space = FeatureSpace::from_model(tfidf);
    let fit = train(&space, &conversations, &config)?;
    let classifier = TrainedClassifier {
        space,
        model: fit.model,
    };
    classifier.save(&out)?;
    let report = evaluate_classifier(&classifier, &conversations)?;
    println!("train_accuracy = {:.6}", report.accuracy);
    println!("model = {}", out.display());
    Ok(())
}

fn run_train_tagger(mut r: Resolver, args: TrainTaggerArgs) -> Result<()> {
    let medical = r.path("medical_terms", args.medical_terms.as_deref())?;
    let non_medical = r.path("non_medical_terms", args.non_medical_terms.as_deref())?;
    let embeddings = r.path("embeddings", args.embeddings.as_deref())?;
    let data = r.path("data", args.data.as_deref())?;
    let config = r.tagger_config(args.mode, &args.shape)?;
    let defaults = TrainHyper::default();
    let base_hyper = TrainHyper {
        epochs: 0, // set per phase below
        batch_size: r.usize("batch_size", args.optim.batch_size, defaults.batch_size)?,
        lr: r.f64("lr", args.optim.lr, defaults.lr)?,
        seed: r.u64("seed", args.optim.seed, defaults.seed)?,
        negative_ratio: r.f64("negative_ratio", args.negative_ratio, defaults.negative_ratio)?,
    };
    let pretrain_epochs = r.usize("pretrain_epochs", args.pretrain_epochs, defaults.epochs)?;
    let epochs = r.usize("epochs", args.epochs, defaults.epochs)?;
    let out = r.path("out", args.out.as_deref())?;
    r.finish("train tagger");

    let lexicon = load_term_lexicon(&[medical.as_path()], &[non_medical.as_path()])?;
    let table = EmbeddingTable::load(&embeddings)?;
    let conversations = load_dataset(&data, DatasetKind::Highlighting)?;
    let started = Instant::now();
    let (base, pretrain_losses) = pretrain(
        &table,
        &lexicon,
        &config,
        &TrainHyper {
            epochs: pretrain_epochs,
            ..base_hyper
        },
    )?;
    log::info!(
        "pretrained in {:.1?}, final loss {:.6}",
        started.elapsed(),
        pretrain_losses.last().copied().unwrap_or(f64::NAN)
    );
    let started = Instant::now();
    let (params, losses) = finetune(
        &base,
        &table,
        &conversations,
        &config,
        &TrainHyper {
            epochs,
            ..base_hyper
        },
    )?;
    log::info!("fine-tuned in {:.1?}", started.elapsed());
    save_checkpoint(&out, &Checkpoint::new(config, base_hyper.seed, params))?;
    println!("final_loss = {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn run_pretrain_tagger(mut r: Resolver, args: PretrainTaggerArgs) -> Result<()> {
    let medical = r.path("medical_terms", args.medical_terms.as_deref())?;
    let non_medical = r.path("non_medical_terms", args.non_medical_terms.as_deref())?;
    let embeddings = r.path("embeddings", args.embeddings.as_deref())?;
    let config = r.tagger_config(args.mode, &args.shape)?;
    let defaults = TrainHyper::default();
    let hyper = TrainHyper {
        epochs: r.usize("epochs", args.epochs, defaults.epochs)?,
        batch_size: r.usize("batch_size", args.optim.batch_size, defaults.batch_size)?,
        lr: r.f64("lr", args.optim.lr, defaults.lr)?,
        seed: r.u64("seed", args.optim.seed, defaults.seed)?,
        negative_ratio: r.f64("negative_ratio", args.negative_ratio, defaults.negative_ratio)?,
    };
    let out = r.path("out", args.out.as_deref())?;
    r.finish("pretrain tagger");

    let lexicon = load_term_lexicon(&[medical.as_path()], &[non_medical.as_path()])?;
    let table = EmbeddingTable::load(&embeddings)?;
    let started = Instant::now();
    let (params, losses) = pretrain(&table, &lexicon, &config, &hyper)?;
    log::info!("pretrained in {:.1?}", started.elapsed());
    save_checkpoint(&out, &Checkpoint::new(config, hyper.seed, params))?;
    println!("final_loss = {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn run_finetune_tagger(mut r: Resolver, args: FinetuneTaggerArgs) -> Result<()> {
    let checkpoint_path = r.path("checkpoint", args.checkpoint.as_deref())?;
    let embeddings = r.path("embeddings", args.embeddings.as_deref())?;
    let data = r.path("data", args.data.as_deref())?;
    let defaults = TrainHyper::default();
    let hyper = TrainHyper {
        epochs: r.usize("epochs", args.epochs, defaults.epochs)?,
        batch_size: r.usize("batch_size", args.optim.batch_size, defaults.batch_size)?,
        lr: r.f64("lr", args.optim.lr, defaults.lr)?,
        seed: r.u64("seed", args.optim.seed, defaults.seed)?,
        negative_ratio: defaults.negative_ratio,
    };
    let out = r.path("out", args.out.as_deref())?;
    r.finish("finetune tagger");

    let checkpoint = load_checkpoint(&checkpoint_path)?;
    log::info!(
        "checkpoint: mode {}, {} cells per direction",
        checkpoint.config.mode.as_str(),
        checkpoint.config.cells_per_direction
    );
    let table = EmbeddingTable::load(&embeddings)?;
    let conversations = load_dataset(&data, DatasetKind::Highlighting)?;
    let started = Instant::now();
    let (params, losses) = finetune(
        &checkpoint.params,
        &table,
        &conversations,
        &checkpoint.config,
        &hyper,
    )?;
    log::info!("fine-tuned in {:.1?}", started.elapsed());
    save_checkpoint(&out, &Checkpoint::new(checkpoint.config, hyper.seed, params))?;
    println!("final_loss = {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint = {}", out.display());
    Ok(())
}

/// Loads the model file behind a `--model` choice as a scoring box.
fn load_highlighter(
    kind: ModelKind,
    model_file: &Path,
    embeddings: Option<&Path>,
    lime: &LimeConfig,
) -> Result<Box<dyn Highlighter>> {
    match kind {
        ModelKind::Tfidf => Ok(Box::new(TfidfHighlighter {
            model: TfidfModel::load(model_file)?,
        })),
        ModelKind::LrLime | ModelKind::SvmLime => {
            let classifier = TrainedClassifier::load(model_file)?;
            let expected = match kind {
                ModelKind::LrLime => LossKind::Logistic,
                _ => LossKind::Hinge,
            };
            if classifier.model.loss != expected {
                bail!(
                    "model file was trained with {} loss, not usable as {}",
                    classifier.model.loss.as_str(),
                    kind
                );
            }
            Ok(Box::new(LimeHighlighter::new(classifier, lime.clone())))
        }
        ModelKind::UnigramTagger | ModelKind::NgramTagger => {
            let embeddings = match embeddings {
                Some(p) => p.to_path_buf(),
                None => return Err(usage("tagger models need --embeddings")),
            };
            let checkpoint = load_checkpoint(model_file)?;
            let expected = match kind {
                ModelKind::UnigramTagger => TaggerMode::Unigram,
                _ => TaggerMode::Ngram,
            };
            if checkpoint.config.mode != expected {
                bail!(
                    "checkpoint is a {} model, not {}",
                    checkpoint.config.mode.as_str(),
                    kind
                );
            }
            Ok(Box::new(TaggerHighlighter {
                params: checkpoint.params,
                config: checkpoint.config,
                table: EmbeddingTable::load(&embeddings)?,
            }))
        }
    }
}

fn run_highlight(mut r: Resolver, args: HighlightArgs) -> Result<()> {
    let model_string = r.string(
        "model",
        args.model.map(|m| m.kind().as_str().to_string()),
        "",
    )?;
    if model_string.is_empty() {
        return Err(usage("missing required --model"));
    }
    let kind: ModelKind = model_string.parse().map_err(usage)?;
    let model_file = r.path("model_file", args.model_file.as_deref())?;
    let needs_lime = matches!(kind, ModelKind::LrLime | ModelKind::SvmLime);
    let lime_defaults = LimeConfig::default();
    let lime = if needs_lime {
        LimeConfig {
            n_samples: r.usize("lime_samples", args.lime_samples, lime_defaults.n_samples)?,
            kernel_width: r.f64("kernel_width", args.kernel_width, lime_defaults.kernel_width)?,
            ridge_l2: r.f64("ridge", args.ridge, lime_defaults.ridge_l2)?,
            seed: r.u64("seed", args.seed, lime_defaults.seed)?,
        }
    } else {
        lime_defaults
    };
    let embeddings = r.opt_path("embeddings", args.embeddings.as_deref())?;
    let data = r.path("data", args.data.as_deref())?;
    let chat = {
        let s = r.string("chat", args.chat, "")?;
        (!s.is_empty()).then_some(s)
    };
    let threshold = r.f64("threshold", args.threshold, kind.default_threshold())?;
    let format = {
        let s = r.string(
            "format",
            args.format.map(|f| f.as_str().to_string()),
            "json",
        )?;
        match s.as_str() {
            "json" => FormatArg::Json,
            "tsv" => FormatArg::Tsv,
            "html" => FormatArg::Html,
            other => return Err(usage(format!("unknown format {other:?}"))),
        }
    };
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("highlight");
    let highlighter = load_highlighter(kind, &model_file, embeddings.as_deref(), &lime)?;

    let mut conversations = load_dataset(&data, DatasetKind::Plain)?;
    if let Some(id) = &chat {
        conversations.retain(|c| &c.id == id);
        if conversations.is_empty() {
            bail!("no conversation with id {id:?} in {}", data.display());
        }
    }

    let scored: Vec<ScoredConversation> = conversations
        .iter()
        .map(|conversation| ScoredConversation {
            id: conversation.id.clone(),
            messages: conversation
                .messages
                .iter()
                .map(|message| ScoredMessage {
                    role: role_str(message.role).to_string(),
                    scores: (message.role == Role::Patient)
                        .then(|| highlighter.score_message(message)),
                })
                .collect(),
        })
        .collect();

    match format {
        FormatArg::Json => {
            let file = ScoresFile {
                model: kind.as_str().to_string(),
                threshold,
                conversations: scored,
            };
            let mut json = serde_json::to_string_pretty(&file)?;
            json.push('\n');
            emit(out.as_deref(), &json)
        }
        FormatArg::Tsv => {
            let mut tsv = String::from("chat\tmessage\ttoken\tsurface\tscore\n");
            for (conversation, scores) in conversations.iter().zip(&scored) {
                for (m_idx, (message, scored_message)) in
                    conversation.messages.iter().zip(&scores.messages).enumerate()
                {
                    let Some(scores) = &scored_message.scores else {
                        continue;
                    };
                    for (t_idx, (token, score)) in
                        message.tokens.iter().zip(scores).enumerate()
                    {
                        tsv.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{:.6}\n",
                            conversation.id, m_idx, t_idx, token.surface, score
                        ));
                    }
                }
            }
            emit(out.as_deref(), &tsv)
        }
        FormatArg::Html => {
            if conversations.len() != 1 {
                return Err(usage(format!(
                    "html output needs a single conversation; got {} (use --chat)",
                    conversations.len()
                )));
            }
            let conversation = &conversations[0];
            let predictions: Vec<Option<Vec<f64>>> = scored[0]
                .messages
                .iter()
                .map(|m| m.scores.clone())
                .collect();
            // Without gold, paint everything above threshold as a match.
            let gold = plain_gold(&predictions, threshold);
            let html = render_html(conversation, &predictions, &gold, threshold)?;
            emit(out.as_deref(), &html)
        }
    }
}

/// Pseudo-gold that marks exactly the predicted tokens, so the renderer
/// paints them as plain matches rather than disagreements.
fn plain_gold(predictions: &[Option<Vec<f64>>], threshold: f64) -> Vec<Option<Vec<u8>>> {
    predictions
        .iter()
        .map(|row| {
            row.as_ref()
                .map(|scores| scores.iter().map(|&s| u8::from(s >= threshold)).collect())
        })
        .collect()
}

fn run_explain(mut r: Resolver, args: ExplainArgs) -> Result<()> {
    let model_file = r.path("model_file", args.model_file.as_deref())?;
    let data = r.path("data", args.data.as_deref())?;
    let chat = r.string("chat", args.chat, "")?;
    if chat.is_empty() {
        return Err(usage("missing required --chat"));
    }
    let defaults = LimeConfig::default();
    let lime = LimeConfig {
        n_samples: r.usize("lime_samples", args.lime_samples, defaults.n_samples)?,
        kernel_width: r.f64("kernel_width", args.kernel_width, defaults.kernel_width)?,
        ridge_l2: r.f64("ridge", args.ridge, defaults.ridge_l2)?,
        seed: r.u64("seed", args.seed, defaults.seed)?,
    };
    let message_index = args.message;
    if let Some(idx) = message_index {
        r.record("message", idx);
    }
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("explain");

    let conversations = load_dataset(&data, DatasetKind::Plain)?;
    let conversation = conversations
        .iter()
        .find(|c| c.id == chat)
        .ok_or_else(|| anyhow!("no conversation with id {chat:?} in {}", data.display()))?;
    let classifier = TrainedClassifier::load(&model_file)?;

    #[derive(Serialize)]
    struct ExplainEntry {
        message_index: usize,
        tokens: Vec<String>,
        #[serde(flatten)]
        explanation: medmark_core::lime::Explanation,
    }
    #[derive(Serialize)]
    struct ExplainOut<'a> {
        id: &'a str,
        model: &'a str,
        explanations: Vec<ExplainEntry>,
    }

    let targets: Vec<usize> = match message_index {
        Some(idx) => {
            if idx >= conversation.messages.len() {
                bail!(
                    "conversation {chat:?} has {} messages, no index {idx}",
                    conversation.messages.len()
                );
            }
            vec![idx]
        }
        None => conversation
            .messages
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == Role::Patient)
            .map(|(i, _)| i)
            .collect(),
    };

    let mut explanations = Vec::new();
    for idx in targets {
        let message = &conversation.messages[idx];
        if message.tokens.is_empty() && message_index.is_none() {
            log::warn!("skipping empty message {idx}");
            continue;
        }
        let explanation = explain_message(&classifier, message, &lime)?;
        explanations.push(ExplainEntry {
            message_index: idx,
            tokens: message.tokens.iter().map(|t| t.norm.clone()).collect(),
            explanation,
        });
    }
    let output = ExplainOut {
        id: &conversation.id,
        model: classifier.model.loss.as_str(),
        explanations,
    };
    let mut json = serde_json::to_string_pretty(&output)?;
    json.push('\n');
    emit(out.as_deref(), &json)
}

/// Everything `evaluate` and `curve` both need: the two splits, the lexicon
/// and the embedding table.
struct ExperimentData {
    train: Vec<Conversation>,
    test: Vec<Conversation>,
    lexicon: medmark_core::corpus::TermLexicon,
    table: EmbeddingTable,
}

fn load_experiment_data(
    train: &Path,
    test: &Path,
    medical: &Path,
    non_medical: &Path,
    embeddings: &Path,
) -> Result<ExperimentData> {
    let train = load_dataset(train, DatasetKind::Highlighting)?;
    let test = load_dataset(test, DatasetKind::Highlighting)?;
    let lexicon = load_term_lexicon(&[medical], &[non_medical])?;
    let table = EmbeddingTable::load(embeddings)?;
    Ok(ExperimentData {
        train,
        test,
        lexicon,
        table,
    })
}

fn metrics_csv(rows: &[MetricsReport]) -> String {
    let mut csv = String::from("model,threshold,precision,recall,roc_auc,pr_auc\n");
    for row in rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.model, row.threshold, row.precision, row.recall, row.roc_auc, row.pr_auc
        ));
    }
    csv
}

fn run_evaluate(mut r: Resolver, args: EvaluateArgs) -> Result<()> {
    let train_path = r.path("train", args.train.as_deref())?;
    let test_path = r.path("test", args.test.as_deref())?;
    let medical = r.path("medical_terms", args.medical_terms.as_deref())?;
    let non_medical = r.path("non_medical_terms", args.non_medical_terms.as_deref())?;
    let embeddings = r.path("embeddings", args.embeddings.as_deref())?;
    let tfidf_threshold = r.f64(
        "tfidf_threshold",
        args.tfidf_threshold,
        ModelKind::Tfidf.default_threshold(),
    )?;
    let lime_threshold = r.f64(
        "lime_threshold",
        args.lime_threshold,
        ModelKind::LrLime.default_threshold(),
    )?;
    let tagger_threshold = r.f64(
        "tagger_threshold",
        args.tagger_threshold,
        ModelKind::NgramTagger.default_threshold(),
    )?;
    let seed = r.u64("seed", args.optim.seed, 0)?;
    let lime_defaults = LimeConfig::default();
    let lime = LimeConfig {
        n_samples: r.usize("lime_samples", args.lime_samples, lime_defaults.n_samples)?,
        kernel_width: r.f64("kernel_width", args.kernel_width, lime_defaults.kernel_width)?,
        ridge_l2: r.f64("ridge", args.ridge, lime_defaults.ridge_l2)?,
        seed,
    };
    let cls_defaults = TrainConfig::default();
    let classifier_epochs = r.usize("classifier_epochs", args.classifier_epochs, cls_defaults.epochs)?;
    let classifier_lr = r.f64("classifier_lr", args.classifier_lr, cls_defaults.learning_rate)?;
    let classifier_l2 = r.f64("classifier_l2", args.classifier_l2, cls_defaults.l2)?;
    let tagger_defaults = TaggerConfig::default();
    let hidden = r.usize("hidden", args.shape.hidden, tagger_defaults.cells_per_direction)?;
    let dropout = r.f64("dropout", args.shape.dropout, tagger_defaults.dropout)?;
    let cell = r.cell_kind(args.shape.cell)?;
    let max_seq_len = r.usize("max_seq_len", args.shape.max_seq_len, tagger_defaults.max_seq_len)?;
    let hyper_defaults = TrainHyper::default();
    let batch_size = r.usize("batch_size", args.optim.batch_size, hyper_defaults.batch_size)?;
    let lr = r.f64("lr", args.optim.lr, hyper_defaults.lr)?;
    let pretrain_epochs = r.usize("pretrain_epochs", args.pretrain_epochs, hyper_defaults.epochs)?;
    let finetune_epochs = r.usize("finetune_epochs", args.finetune_epochs, hyper_defaults.epochs)?;
    let negative_ratio = r.f64("negative_ratio", args.negative_ratio, hyper_defaults.negative_ratio)?;
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("evaluate");

    let data = load_experiment_data(&train_path, &test_path, &medical, &non_medical, &embeddings)?;
    for conversation in &data.train {
        if conversation.issue_category.is_none() {
            bail!(
                "training conversation {:?} has no issue_category (the classifier needs one)",
                conversation.id
            );
        }
    }

    let mut rows = Vec::with_capacity(ModelKind::ALL.len());

    let started = Instant::now();
    let tfidf = TfidfModel::fit(&data.train)?;
    let tfidf_highlighter = TfidfHighlighter {
        model: tfidf.clone(),
    };
    rows.push(evaluate_model(&tfidf_highlighter, &data.test, tfidf_threshold)?);
    log::info!("tfidf done in {:.1?}", started.elapsed());

    for loss in [LossKind::Logistic, LossKind::Hinge] {
        let started = Instant::now();
        let space = FeatureSpace::from_model(tfidf.clone());
        let config = TrainConfig {
            loss,
            l2: classifier_l2,
            learning_rate: classifier_lr,
            epochs: classifier_epochs,
            seed,
        };
        let fit = train(&space, &data.train, &config)?;
        let classifier = TrainedClassifier {
            space,
            model: fit.model,
        };
        let highlighter = LimeHighlighter::new(classifier, lime.clone());
        rows.push(evaluate_model(&highlighter, &data.test, lime_threshold)?);
        log::info!("{} done in {:.1?}", rows.last().unwrap().model, started.elapsed());
    }

    for mode in [TaggerMode::Unigram, TaggerMode::Ngram] {
        let started = Instant::now();
        let config = TaggerConfig {
            cells_per_direction: hidden,
            dropout,
            mode,
            cell,
            max_seq_len,
        };
        let (base, _) = pretrain(
            &data.table,
            &data.lexicon,
            &config,
            &TrainHyper {
                epochs: pretrain_epochs,
                batch_size,
                lr,
                seed,
                negative_ratio,
            },
        )?;
        let (params, _) = finetune(
            &base,
            &data.table,
            &data.train,
            &config,
            &TrainHyper {
                epochs: finetune_epochs,
                batch_size,
                lr,
                seed,
                negative_ratio,
            },
        )?;
        let highlighter = TaggerHighlighter {
            params,
            config,
            table: data.table.clone(),
        };
        rows.push(evaluate_model(&highlighter, &data.test, tagger_threshold)?);
        log::info!("{} done in {:.1?}", rows.last().unwrap().model, started.elapsed());
    }

    emit(out.as_deref(), &metrics_csv(&rows))
}

fn run_curve(mut r: Resolver, args: CurveArgs) -> Result<()> {
    let train_path = r.path("train", args.train.as_deref())?;
    let test_path = r.path("test", args.test.as_deref())?;
    let medical = r.path("medical_terms", args.medical_terms.as_deref())?;
    let non_medical = r.path("non_medical_terms", args.non_medical_terms.as_deref())?;
    let embeddings = r.path("embeddings", args.embeddings.as_deref())?;
    let data = load_experiment_data(&train_path, &test_path, &medical, &non_medical, &embeddings)?;

    let mode = {
        let s = r.string(
            "mode",
            args.mode.map(|m| m.as_str().to_string()),
            "both",
        )?;
        match s.as_str() {
            "unigram" => CurveModeArg::Unigram,
            "ngram" => CurveModeArg::Ngram,
            "both" => CurveModeArg::Both,
            other => return Err(usage(format!("unknown curve mode {other:?}"))),
        }
    };
    let curve_defaults = CurveOptions::default();
    let step = r.usize("step", args.step, curve_defaults.step)?;
    let max = r.usize("max", args.max, data.train.len())?;
    let nested = r.bool("nested", args.nested, curve_defaults.nested)?;
    let tagger_defaults = TaggerConfig::default();
    let hidden = r.usize("hidden", args.shape.hidden, tagger_defaults.cells_per_direction)?;
    let dropout = r.f64("dropout", args.shape.dropout, tagger_defaults.dropout)?;
    let cell = r.cell_kind(args.shape.cell)?;
    let max_seq_len = r.usize("max_seq_len", args.shape.max_seq_len, tagger_defaults.max_seq_len)?;
    let hyper_defaults = TrainHyper::default();
    let batch_size = r.usize("batch_size", args.optim.batch_size, hyper_defaults.batch_size)?;
    let lr = r.f64("lr", args.optim.lr, hyper_defaults.lr)?;
    let seed = r.u64("seed", args.optim.seed, hyper_defaults.seed)?;
    let pretrain_epochs = r.usize("pretrain_epochs", args.pretrain_epochs, hyper_defaults.epochs)?;
    let epochs = r.usize("epochs", args.epochs, hyper_defaults.epochs)?;
    let negative_ratio = r.f64("negative_ratio", args.negative_ratio, hyper_defaults.negative_ratio)?;
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("curve");

    let modes: &[TaggerMode] = match mode {
        CurveModeArg::Unigram => &[TaggerMode::Unigram],
        CurveModeArg::Ngram => &[TaggerMode::Ngram],
        CurveModeArg::Both => &[TaggerMode::Unigram, TaggerMode::Ngram],
    };
    let mut csv = String::from("n,pr_auc,mode\n");
    for &tagger_mode in modes {
        let config = TaggerConfig {
            cells_per_direction: hidden,
            dropout,
            mode: tagger_mode,
            cell,
            max_seq_len,
        };
        let hyper = TrainHyper {
            epochs,
            batch_size,
            lr,
            seed,
            negative_ratio,
        };
        let started = Instant::now();
        let (base, _) = pretrain(
            &data.table,
            &data.lexicon,
            &config,
            &TrainHyper {
                epochs: pretrain_epochs,
                ..hyper
            },
        )?;
        let curve = learning_curve(
            &base,
            &config,
            &data.table,
            &data.train,
            &data.test,
            &CurveOptions {
                step,
                max,
                seed,
                nested,
                hyper,
            },
        )?;
        log::info!("{} curve done in {:.1?}", curve.mode, started.elapsed());
        for point in &curve.points {
            csv.push_str(&format!("{},{:.6},{}\n", point.n, point.pr_auc, curve.mode));
        }
    }
    emit(out.as_deref(), &csv)
}

fn run_agreement(mut r: Resolver, args: AgreementArgs) -> Result<()> {
    let files: Vec<PathBuf> = args
        .files
        .iter()
        .map(|p| join_root(&r.root, p))
        .collect();
    for (idx, file) in files.iter().enumerate() {
        r.record(&format!("annotator_{idx}"), file.display());
    }
    r.finish("agreement");

    let mut datasets = Vec::with_capacity(files.len());
    for file in &files {
        datasets.push(load_dataset(file, DatasetKind::Highlighting)?);
    }

    // The first annotator's token grid defines the units; other annotators
    // may omit whole conversations (missing ratings), but any conversation
    // they do have must align token for token.
    let reference = &datasets[0];
    let mut rows: Vec<Vec<Option<u8>>> = vec![Vec::new(); datasets.len()];
    for conversation in reference {
        for (m_idx, message) in conversation.messages.iter().enumerate() {
            let Some(reference_gold) = &message.gold else {
                continue;
            };
            for (a_idx, dataset) in datasets.iter().enumerate() {
                let row = &mut rows[a_idx];
                let Some(other) = dataset.iter().find(|c| c.id == conversation.id) else {
                    row.extend(std::iter::repeat(None).take(reference_gold.len()));
                    continue;
                };
                let other_gold = other
                    .messages
                    .get(m_idx)
                    .and_then(|m| m.gold.as_ref())
                    .ok_or_else(|| {
                        anyhow!(
                            "annotator {} conversation {:?} message {m_idx}: no gold labels",
                            a_idx + 1,
                            conversation.id
                        )
                    })?;
                if other_gold.len() != reference_gold.len() {
                    bail!(
                        "annotator {} conversation {:?} message {m_idx}: {} tokens, expected {}",
                        a_idx + 1,
                        conversation.id,
                        other_gold.len(),
                        reference_gold.len()
                    );
                }
                row.extend(other_gold.iter().map(|&v| Some(v)));
            }
        }
    }

    let annotations = AnnotationSet::new(rows)?;
    let alpha = krippendorff_alpha(&annotations)?;
    println!("annotators = {}", datasets.len());
    println!("units = {}", annotations.unit_count);
    println!("alpha = {alpha:.6}");
    Ok(())
}

fn run_report(mut r: Resolver, args: ReportArgs) -> Result<()> {
    let data = r.path("data", args.data.as_deref())?;
    let scores_path = r.path("scores", args.scores.as_deref())?;
    let scores_text = fs::read_to_string(&scores_path)
        .with_context(|| format!("reading {}", scores_path.display()))?;
    let scores: ScoresFile = serde_json::from_str(&scores_text)
        .with_context(|| format!("parsing {}", scores_path.display()))?;

    let conversations = load_dataset(&data, DatasetKind::Plain)?;
    let fallback = match conversations.as_slice() {
        [only] => only.id.clone(),
        _ => String::new(),
    };
    let chat = r.string("chat", args.chat, &fallback)?;
    if chat.is_empty() {
        return Err(usage(format!(
            "the dataset has {} conversations; pick one with --chat",
            conversations.len()
        )));
    }
    let threshold = r.f64("threshold", args.threshold, scores.threshold)?;
    r.record("plain", args.plain);
    let out = r.opt_path("out", args.out.as_deref())?;
    r.finish("report");

    let conversation = conversations
        .iter()
        .find(|c| c.id == chat)
        .ok_or_else(|| anyhow!("no conversation with id {chat:?} in {}", data.display()))?;
    let scored = scores
        .conversations
        .iter()
        .find(|c| c.id == chat)
        .ok_or_else(|| {
            anyhow!(
                "no conversation with id {chat:?} in {}",
                scores_path.display()
            )
        })?;
    let predictions: Vec<Option<Vec<f64>>> =
        scored.messages.iter().map(|m| m.scores.clone()).collect();
    let gold: Vec<Option<Vec<u8>>> = if args.plain {
        plain_gold(&predictions, threshold)
    } else {
        conversation.messages.iter().map(|m| m.gold.clone()).collect()
    };
    let html = render_html(conversation, &predictions, &gold, threshold)?;
    emit(out.as_deref(), &html)
}

fn run_synth(mut r: Resolver, args: SynthArgs) -> Result<()> {
    let defaults = SyntheticOptions::default();
    let options = SyntheticOptions {
        train_chats: r.usize("train_chats", args.train_chats, defaults.train_chats)?,
        test_chats: r.usize("test_chats", args.test_chats, defaults.test_chats)?,
        seed: r.u64("seed", args.seed, defaults.seed)?,
        embedding_dim: r.usize("dim", args.dim, defaults.embedding_dim)?,
    };
    let out_dir = r.path("out_dir", args.out_dir.as_deref())?;
    r.finish("synth");

    let benchmark = generate(&options);
    write_benchmark(&out_dir, &benchmark)
        .with_context(|| format!("writing benchmark to {}", out_dir.display()))?;
    for name in [
        "train.jsonl",
        "test.jsonl",
        "medical_terms.txt",
        "non_medical_terms.txt",
        "embeddings.txt",
    ] {
        println!("wrote {}", out_dir.join(name).display());
    }
    Ok(())
}
