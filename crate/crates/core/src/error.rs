use std::path::PathBuf;

/// Errors raised anywhere in the compile / simulate pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid width multiplier: {0}")]
    WidthMultiplier(String),

    #[error("batch-norm fusion: {0}")]
    BatchNormFusion(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("quantization: {0}")]
    Quantization(String),

    #[error("accumulator overflow: {0}")]
    AccumulatorOverflow(String),

    #[error("stream underrun in {stage}: expected {expected} elements, received {received}")]
    Underrun {
        stage: String,
        expected: usize,
        received: usize,
    },

    #[error("pipeline deadlock: {0}")]
    Deadlock(String),

    #[error("compile: {0}")]
    Compile(String),

    #[error("memory: {0}")]
    Memory(String),

    #[error("runtime: {0}")]
    Runtime(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
