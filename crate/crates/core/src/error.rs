use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("rows have different lengths")]
    Ragged,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: {msg}")]
    BadOperand { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadEpsilon(f64),
}

impl AutodiffError {
    pub(crate) fn operand(op: &'static str, msg: impl Into<String>) -> Self {
        AutodiffError::BadOperand {
            op,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary budget {budget} is below the required minimum {required} (specials + character inventory)")]
    BudgetTooSmall { budget: usize, required: usize },
    #[error("invalid trainer setting: {0}")]
    BadSetting(String),
    #[error("token id {id} is out of range for a vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed model file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid sentence pair: {0}")]
    InvalidPair(String),
    #[error("language identification needs at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("language '{lang}' has {count} samples, need at least {min}")]
    TooFewSamples {
        lang: String,
        count: usize,
        min: usize,
    },
    #[error("unknown language '{0}'")]
    UnknownLanguage(String),
    #[error("invalid filter setting: {0}")]
    BadSetting(String),
    #[error("pair {index} needs {tokens} tokens, exceeding the batch budget of {budget}")]
    PairExceedsBudget {
        index: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("aligned files differ in length: {left} has {left_lines} lines, {right} has {right_lines}")]
    LineCountMismatch {
        left: PathBuf,
        left_lines: usize,
        right: PathBuf,
        right_lines: usize,
    },
    #[error("malformed provenance at line {line}: {msg}")]
    Provenance { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{side} id {id} is outside the vocabulary of {size}")]
    IdOutOfRange {
        side: &'static str,
        id: usize,
        size: usize,
    },
    #[error("sequence of length {len} exceeds the maximum of {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("target prefix must start with bos")]
    MissingBos,
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty source sentence")]
    EmptySource,
    #[error("invalid beam setting: {0}")]
    BadSetting(String),
    #[error("hypothesis is unfinished (no eos emitted)")]
    Unfinished,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("every target position is padding")]
    AllPad,
    #[error("non-finite gradient for parameter '{0}'; step rejected")]
    NonFiniteGradient(String),
    #[error("invalid training setting: {0}")]
    BadSetting(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("rank sequence needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("rank sequence contains duplicates")]
    DuplicateRanks,
    #[error("invalid metric parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Error)]
pub enum BacktranslationError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("reverse model is unusable: {0}")]
    Untrained(String),
    #[error("pair {0} is not synthetic; the synthetic filter only accepts backtranslated data")]
    RealPair(usize),
    #[error("invalid augmentation plan: {0}")]
    BadPlan(String),
}
