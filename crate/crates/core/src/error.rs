use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward of `{op}` returned {got} gradients for {expected} inputs")]
    BackwardArity {
        op: String,
        expected: usize,
        got: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument `{name}`: {detail}")]
    InvalidArgument { name: &'static str, detail: String },

    #[error("invalid bit ladder {bits:?}: {detail}")]
    InvalidLadder { bits: Vec<u32>, detail: String },

    #[error("group index {index} out of range for {groups} groups")]
    GroupIndex { index: usize, groups: usize },

    #[error("configuration does not match layer specs: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value produced by op `{op}` in layer `{layer}`")]
    NonFinite { layer: String, op: String },

    #[error("search space has {count} configurations, budget is {budget}; shrink the network")]
    OverBudget { count: String, budget: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            detail: detail.into(),
        }
    }
}
