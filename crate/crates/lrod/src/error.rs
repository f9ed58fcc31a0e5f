use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Error, Debug)]
pub enum LrodError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("scene generation failed (seed {seed}): {reason}")]
    Generation { seed: u64, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training diverged at step {step}: {term} = {value}")]
    Diverged {
        step: usize,
        term: String,
        value: f64,
    },

    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),
}

pub type Result<T> = std::result::Result<T, LrodError>;

impl LrodError {
    pub fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        LrodError::Shape {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LrodError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
