use std::fmt;
use std::io;
use std::path::Path;

use deskmt::error::{
    BacktranslationError, CorpusError, DecodeError, MetricError, ModelError, SubwordError,
    TrainError,
};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Internal,
    Usage,
    MissingFile,
    Config,
    InvalidData,
    Mismatch,
    Training,
    Io,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Internal,
        Category::Usage,
        Category::MissingFile,
        Category::Config,
        Category::InvalidData,
        Category::Mismatch,
        Category::Training,
        Category::Io,
    ];

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::MissingFile => 3,
            Category::Config => 4,
            Category::InvalidData => 5,
            Category::Mismatch => 6,
            Category::Training => 7,
            Category::Io => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::MissingFile => "missing-file",
            Category::Config => "config",
            Category::InvalidData => "invalid-data",
            Category::Mismatch => "mismatch",
            Category::Training => "training",
            Category::Io => "io",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Category::Internal => "unexpected internal failure",
            Category::Usage => "bad command-line arguments",
            Category::MissingFile => "an input file does not exist",
            Category::Config => "configuration is malformed, has unknown keys or invalid values",
            Category::InvalidData => "input data is malformed (corpus, tokenizer or checkpoint contents)",
            Category::Mismatch => "shape, version, dtype or vocabulary mismatch between artifacts",
            Category::Training => "training or decoding could not proceed",
            Category::Io => "reading or writing a file failed",
        }
    }
}

/// Exit-code table, as shown in `--help`.
pub fn exit_code_table() -> String {
    let mut s = String::from("Exit codes:\n  0  success\n");
    for c in Category::ALL {
        s.push_str(&format!("  {}  {:<13} {}\n", c.exit_code(), c.name(), c.describe()));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.name(), self.message)
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(
            Category::MissingFile,
            format!("{} does not exist", path.display()),
        ))
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        let category = if e.kind() == io::ErrorKind::NotFound {
            Category::MissingFile
        } else {
            Category::Io
        };
        CliError::new(category, e.to_string())
    }
}

impl From<SubwordError> for CliError {
    fn from(e: SubwordError) -> Self {
        match e {
            SubwordError::Io(e) => e.into(),
            SubwordError::BudgetTooSmall { .. } | SubwordError::BadSetting(_) => {
                CliError::config(e.to_string())
            }
            SubwordError::IdOutOfRange { .. } => CliError::new(Category::Mismatch, e.to_string()),
            SubwordError::EmptyCorpus | SubwordError::Format { .. } => {
                CliError::new(Category::InvalidData, e.to_string())
            }
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(e) => e.into(),
            CorpusError::BadSetting(_) | CorpusError::UnknownLanguage(_) => {
                CliError::config(e.to_string())
            }
            CorpusError::PairExceedsBudget { .. } => CliError::new(Category::Training, e.to_string()),
            _ => CliError::new(Category::InvalidData, e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::config(e.to_string()),
            ModelError::Autodiff(_) => CliError::new(Category::Internal, e.to_string()),
            _ => CliError::new(Category::Mismatch, e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Corpus(e) => e.into(),
            TrainError::Io(e) => e.into(),
            TrainError::Mismatch(_) => CliError::new(Category::Mismatch, e.to_string()),
            TrainError::Format(_) => CliError::new(Category::InvalidData, e.to_string()),
            TrainError::BadSetting(_) => CliError::config(e.to_string()),
            TrainError::Autodiff(_) => CliError::new(Category::Internal, e.to_string()),
            TrainError::AllPad | TrainError::NonFiniteGradient(_) => {
                CliError::new(Category::Training, e.to_string())
            }
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Model(e) => e.into(),
            DecodeError::BadSetting(_) => CliError::config(e.to_string()),
            DecodeError::EmptySource => CliError::new(Category::InvalidData, e.to_string()),
            DecodeError::Unfinished => CliError::new(Category::Training, e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::BadParameter(_) => CliError::config(e.to_string()),
            _ => CliError::new(Category::InvalidData, e.to_string()),
        }
    }
}

impl From<BacktranslationError> for CliError {
    fn from(e: BacktranslationError) -> Self {
        match e {
            BacktranslationError::Decode(e) => e.into(),
            BacktranslationError::Corpus(e) => e.into(),
            BacktranslationError::BadPlan(_) => CliError::config(e.to_string()),
            BacktranslationError::Untrained(_) => CliError::new(Category::Training, e.to_string()),
            BacktranslationError::RealPair(_) => CliError::new(Category::InvalidData, e.to_string()),
        }
    }
}
