use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown input or parameter `{0}`")]
    UnknownName(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("degenerate signal: cannot power-normalize an all-zero embedding")]
    DegenerateSignal,

    #[error("channel matrix is singular (H^T H not invertible): {0}")]
    ChannelSingular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure in {context}")]
    Numeric { context: String },

    #[error("invalid configuration field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("parameter `{0}` does not belong to a known block")]
    UnclassifiedParameter(String),

    #[error("aggregation expected {expected} client updates, got {got}")]
    MissingClient { expected: usize, got: usize },

    #[error(
        "bound is vacuous for c = {c}: lambda1 = {lambda1}, lambda2 = {lambda2}; choose c < {max_c}"
    )]
    VacuousBound {
        c: f64,
        lambda1: f64,
        lambda2: f64,
        max_c: f64,
    },

    #[error(
        "image {height}x{width} too small for {requested} scales; at most {max_feasible} feasible"
    )]
    TooFewPixels {
        height: usize,
        width: usize,
        requested: usize,
        max_feasible: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid contrastive batch: {0}")]
    Contrastive(String),

    #[error("constant estimation failed: {0}")]
    Estimation(String),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    /// True for failures caused by non-finite values during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }

    /// True for configuration validation failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig { .. })
    }
}

pub type Result<T> = core::result::Result<T, Error>;
