use thiserror::Error;

/// Errors raised by the numerical core and the training loops.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("SVD failed to converge for a {rows}x{cols} matrix after {sweeps} sweeps")]
    DecompositionFailure {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("non-finite value produced at layer {layer} during {op}")]
    NumericOverflow { op: &'static str, layer: usize },

    #[error("{op} would materialize {required} floats, exceeding the cap of {cap}")]
    SizeExceeded {
        op: &'static str,
        required: usize,
        cap: usize,
    },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
