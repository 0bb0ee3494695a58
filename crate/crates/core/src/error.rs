use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected}, got {actual:?}")]
    ShapeMismatch {
        node: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("gradient root {node} must have shape [1], found {shape:?}")]
    NonScalarRoot { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model spec rejected at layer `{layer}`: {reason}")]
    InvalidSpec { layer: String, reason: String },

    #[error("unknown layer `{name}` (valid layers: {valid})")]
    UnknownLayer { name: String, valid: String },

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("non-finite gradient at optimization step {step}")]
    NonFiniteGradient { step: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("no inputs predicted as class {class}: {filtered} of {total} inputs were filtered out")]
    EmptyClassSet {
        class: usize,
        filtered: usize,
        total: usize,
    },

    #[error("insufficient variety: {0}")]
    InsufficientVariety(String),

    #[error("sets overlap: {0}")]
    Overlap(String),

    #[error("eigen solver did not converge after {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("matrix is not positive semi-definite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },

    #[error("bad magic in {path:?}: not a cpak container")]
    BadMagic { path: PathBuf },

    #[error("unsupported container version `{found}` (expected `1`)")]
    VersionMismatch { found: String },

    #[error("truncated container: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file {path:?}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
