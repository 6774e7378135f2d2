use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    /// Process exit status for this class.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("failed to decode image for sample {sample_id}: {message}")]
    Decode { sample_id: String, message: String },

    #[error("invalid preprocessing spec: {0}")]
    Preprocess(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("non-finite values in sample {0}")]
    NonFinite(String),

    #[error(transparent)]
    Cache(#[from] CacheError),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("kernel matrix for {n} rows needs {required} bytes, over the {budget}-byte budget; subsample the training set or raise the budget")]
    MemoryGuard { n: usize, required: u64, budget: u64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown dataset {0:?} in benchmark table")]
    UnknownDataset(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Stage { source, .. } => source.class(),
            Error::Config(_) | Error::UnknownDataset(_) | Error::Preprocess(_) => {
                ErrorClass::Config
            }
            Error::Encoder(_) => ErrorClass::Config,
            Error::DegenerateLabels(_)
            | Error::DegenerateInput(_)
            | Error::UndefinedAuc(_)
            | Error::MemoryGuard { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

/// Failure modes of the `.embd` embedding cache.
#[derive(Debug, Error)]
pub enum CacheError {
    #[error("not an embedding cache (bad magic {0:02x?})")]
    Magic([u8; 4]),

    #[error("unsupported cache version {found} (this build reads version {supported})")]
    Version { found: u16, supported: u16 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("malformed cache metadata: {0}")]
    Metadata(String),

    #[error("refusing to write an inconsistent matrix: {0}")]
    Invariant(String),
}
