use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("input too short: {0}")]
    Length(String),

    #[error("unsupported resampling ratio {from} -> {to} Hz")]
    UnsupportedRatio { from: u32, to: u32 },

    #[error("unsupported sample rate {rate} Hz for {what}")]
    Rate { rate: u32, what: String },

    #[error("filterbank is numerically rank deficient (rank {rank} < {rows})")]
    NumericalRank { rank: usize, rows: usize },

    #[error("batch composition error: {0}")]
    Composition(String),

    #[error("degenerate frame {frame}: both feature vectors have zero norm")]
    DegenerateFrame { frame: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite value in batch {batch}: {what}")]
    Numerical { batch: usize, what: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{stage}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::UnsupportedRatio { .. } => {
                ErrorClass::Usage
            }
            Error::Numerical { .. } | Error::NumericalRank { .. } | Error::DegenerateFrame { .. } => {
                ErrorClass::Numerical
            }
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
