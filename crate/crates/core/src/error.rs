use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("masked softmax: no valid entry along the reduction axis")]
    NoValidEntries,

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("scene generation failed for seed {seed}: {msg}")]
    Placement { seed: u64, msg: String },

    #[error("hard instance mining in train mode requires ground-truth boxes")]
    MissingGroundTruth,

    #[error("degenerate box: BEV footprint has zero area")]
    DegenerateBox,

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint incompatible with model: {}", .0.join("; "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}
