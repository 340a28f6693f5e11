use std::path::PathBuf;

/// Errors produced anywhere in the breathing-state pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid record: {0}")]
    Validation(String),

    #[error("feature matrix is empty")]
    EmptyMatrix,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate ECG subspace: {0}")]
    DegenerateSubspace(String),

    #[error("Gram matrix of the ECG subspace is singular (flat or degenerate ECG)")]
    SingularGram,

    #[error("no AO peak candidate exceeded the adaptive threshold")]
    NoPeaksFound,

    #[error("need at least 2 AO peaks to form a heart cycle, got {0}")]
    TooFewPeaks(usize),

    #[error("beat is constant; amplitude normalization is undefined")]
    ConstantBeat,

    #[error("diastole segment is constant; entropy normalization is undefined")]
    ConstantSegment,

    #[error("need at least {needed} beats, got {got}")]
    TooFewBeats { needed: usize, got: usize },

    #[error("signal has zero variance")]
    ZeroVariance,

    #[error("magnitude spectrum is identically zero")]
    ZeroSpectrum,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("loss became non-finite during {0}")]
    NonFiniteLoss(&'static str),

    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("too few samples for cross-validation: {0}")]
    TooFewSamples(String),

    #[error("ROC is undefined for class {0}: fold contains a single class")]
    SingleClassFold(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failing computation.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
