//! Pipeline configuration: one TOML file, validated against a fixed schema.
//!
//! Relative `data.*` file paths and `backtranslation.monolingual` resolve
//! against `data.dir`; `data.dir`, `work_dir` and
//! `backtranslation.reverse_checkpoint` resolve against the current
//! directory. `--set key=value` overrides are applied to the parsed file
//! before validation, so they obey the same schema.

use std::fs;
use std::path::{Path, PathBuf};

use deskmt::backtranslation::AugmentationPlan;
use deskmt::corpus::SideSelector;
use deskmt::decoding::BeamConfig;
use deskmt::metrics::MetricOptions;
use deskmt::model::ModelConfig;
use deskmt::subword::{ModelKind, DEFAULT_VOCAB_BUDGET};
use deskmt::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{require_file, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub train_provenance: Option<PathBuf>,
    pub valid_source: PathBuf,
    pub valid_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
    /// Tab-separated `language<TAB>sentence` lines for the language
    /// identifier; without it the language filter is skipped.
    pub langid_samples: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("."),
            train_source: "train.src".into(),
            train_target: "train.tgt".into(),
            train_provenance: None,
            valid_source: "valid.src".into(),
            valid_target: "valid.tgt".into(),
            test_source: "test.src".into(),
            test_target: "test.tgt".into(),
            langid_samples: None,
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub length_side: SideSelector,
    pub langid_threshold: f64,
    pub source_lang: String,
    pub target_lang: String,
    pub lowercase: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_len: 10,
            max_len: 30,
            length_side: SideSelector::Both,
            langid_threshold: deskmt::corpus::DEFAULT_LANGID_THRESHOLD,
            source_lang: "src".into(),
            target_lang: "tgt".into(),
            lowercase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub kind: ModelKind,
    pub source_vocab: usize,
    pub target_vocab: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            kind: ModelKind::Bpe,
            source_vocab: DEFAULT_VOCAB_BUDGET,
            target_vocab: DEFAULT_VOCAB_BUDGET,
        }
    }
}

/// Model settings; vocabulary sizes come from the trained tokenizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub kernel_width: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub residual_scaling: bool,
    pub attention: Vec<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 512,
            hidden_dim: 512,
            kernel_width: 3,
            layers: 20,
            dropout: 0.1,
            max_positions: 1024,
            residual_scaling: true,
            attention: Vec::new(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, source_vocab: usize, target_vocab: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            kernel_width: self.kernel_width,
            layers: self.layers,
            dropout: self.dropout,
            source_vocab,
            target_vocab,
            max_positions: self.max_positions,
            residual_scaling: self.residual_scaling,
            attention: self.attention.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub precision: Precision,
    pub work_dir: PathBuf,
    /// Also train and evaluate a forward model on the real data alone.
    pub baseline: bool,
    pub data: DataConfig,
    pub filter: FilterConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub decoding: BeamConfig,
    pub backtranslation: AugmentationPlan,
    pub metrics: MetricOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            precision: Precision::F32,
            work_dir: PathBuf::from("run"),
            baseline: true,
            data: DataConfig::default(),
            filter: FilterConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            decoding: BeamConfig::default(),
            backtranslation: AugmentationPlan::default(),
            metrics: MetricOptions::default(),
        }
    }
}

/// Every configuration key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("precision", "\"f32\"", "floating-point type for parameters: f32 or f64"),
    ("work_dir", "\"run\"", "directory for every artifact of a pipeline run"),
    ("baseline", "true", "also train and evaluate a forward model on real data only"),
    ("data.dir", "\".\"", "base directory for relative data.* paths"),
    ("data.train_source", "\"train.src\"", "training source sentences, one per line"),
    ("data.train_target", "\"train.tgt\"", "training target sentences, aligned by line"),
    ("data.train_provenance", "unset", "optional provenance side-file for the training pairs"),
    ("data.valid_source", "\"valid.src\"", "validation source sentences"),
    ("data.valid_target", "\"valid.tgt\"", "validation target sentences"),
    ("data.test_source", "\"test.src\"", "held-out source sentences for evaluation"),
    ("data.test_target", "\"test.tgt\"", "held-out references"),
    ("data.langid_samples", "unset", "language<TAB>sentence lines; enables the language filter"),
    ("filter.min_len", "10", "minimum subword tokens per side (inclusive)"),
    ("filter.max_len", "30", "maximum subword tokens per side (inclusive)"),
    ("filter.length_side", "\"both\"", "sides the length bounds apply to: source, target or both"),
    ("filter.langid_threshold", "0.95", "minimum posterior of the expected language, both sides"),
    ("filter.source_lang", "\"src\"", "language label of the source side in the langid samples"),
    ("filter.target_lang", "\"tgt\"", "language label of the target side in the langid samples"),
    ("filter.lowercase", "false", "lowercase the corpus before filtering (default keeps case)"),
    ("tokenizer.kind", "\"bpe\"", "subword model: bpe or unigram"),
    ("tokenizer.source_vocab", "8000", "source vocabulary budget, special symbols included"),
    ("tokenizer.target_vocab", "8000", "target vocabulary budget, special symbols included"),
    ("model.embed_dim", "512", "embedding size"),
    ("model.hidden_dim", "512", "convolution channels"),
    ("model.kernel_width", "3", "convolution kernel width"),
    ("model.layers", "20", "convolution blocks in encoder and in decoder"),
    ("model.dropout", "0.1", "dropout probability during training"),
    ("model.max_positions", "1024", "longest sequence the position embeddings cover"),
    ("model.residual_scaling", "true", "scale residual sums by sqrt(0.5)"),
    ("model.attention", "[]", "per decoder layer attention switches; missing entries attend"),
    ("training.seed", "1", "seed for initialization, batching and dropout"),
    ("training.batch_tokens", "4000", "padded source+target tokens per batch"),
    ("training.accumulation", "1", "batches summed into one update"),
    ("training.momentum", "0.99", "Nesterov momentum"),
    ("training.clip_norm", "0.1", "global gradient-norm clip; 0 disables"),
    ("training.schedule.kind", "\"warmup-exp-decay\"", "fixed or warmup-exp-decay"),
    ("training.schedule.base_lr", "0.25", "learning rate during warm-up"),
    ("training.schedule.warmup_steps", "16000", "updates at the base rate"),
    ("training.schedule.decay", "0.9995", "per-update decay factor after warm-up"),
    ("training.patience", "3", "epochs without validation improvement before stopping"),
    ("training.max_epochs", "100", "hard epoch limit"),
    ("training.average_last", "0", "average the last n epoch checkpoints; 0 keeps the best"),
    ("decoding.beam_width", "10", "beam size"),
    ("decoding.max_len", "100", "maximum output tokens"),
    ("decoding.length_penalty", "1.0", "exponent of the length normalization"),
    ("backtranslation.reverse_checkpoint", "unset", "pretrained reverse model; trained when unset"),
    ("backtranslation.monolingual", "unset", "target-language sentences (under data.dir); unset skips augmentation"),
    ("backtranslation.confidence_threshold", "0.3", "minimum synthetic pair confidence"),
    ("backtranslation.min_len", "10", "minimum subword tokens of synthetic pairs"),
    ("backtranslation.max_len", "30", "maximum subword tokens of synthetic pairs"),
    ("backtranslation.length_side", "\"source\"", "sides the synthetic length bounds apply to"),
    ("backtranslation.merge", "\"concat\"", "concat or concat-with-provenance-tag"),
    ("metrics.smooth", "false", "add-one smoothing of BLEU precisions"),
    ("metrics.ribes_alpha", "0.25", "RIBES unigram-precision exponent"),
    ("metrics.ribes_beta", "0.1", "RIBES brevity-penalty exponent"),
];

/// The key table rendered for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (TOML; override with --set key=value):\n");
    for (key, default, doc) in KEYS {
        s.push_str(&format!("  {key:<38} {default:<20} {doc}\n"));
    }
    s
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{raw}' is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::config(format!("override key '{key}' is malformed")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("'{p}' is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::config(format!("malformed config: {e}")))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                require_file(p)?;
                fs::read_to_string(p)?
            }
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match path {
            Some(p) => e.context(p.display()),
            None => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .model_config(16, 16)
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.decoding
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.backtranslation
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        let f = &self.filter;
        if f.min_len < 1 || f.min_len > f.max_len {
            return Err(CliError::config(format!(
                "filter length bounds must satisfy 1 ≤ min ≤ max, got ({}, {})",
                f.min_len, f.max_len
            )));
        }
        if !(f.langid_threshold > 0.0 && f.langid_threshold <= 1.0) {
            return Err(CliError::config(format!(
                "filter.langid_threshold {} outside (0, 1]",
                f.langid_threshold
            )));
        }
        if f.source_lang == f.target_lang {
            return Err(CliError::config("filter.source_lang and filter.target_lang must differ"));
        }
        if self.metrics.ribes_alpha < 0.0 || self.metrics.ribes_beta < 0.0 {
            return Err(CliError::config("RIBES exponents must be non-negative"));
        }
        Ok(())
    }
}
