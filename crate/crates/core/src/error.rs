use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: mask row {row} has no unmasked entries")]
    DegenerateMask { op: &'static str, row: usize },

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("prompt depth {depth} exceeds encoder depth {layers}")]
    Depth { depth: usize, layers: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frozen parameter `{0}` cannot be updated")]
    FrozenParameter(String),

    #[error("contrastive loss needs a batch of at least 2 pairs, got {0}")]
    DegenerateContrastive(usize),

    #[error("cannot sample {needed} items of class {class}: only {available} available")]
    Sampling { class: u8, needed: usize, available: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
