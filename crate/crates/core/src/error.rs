use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("augmented sequence needs {required} positions but max_seq_len is {max}")]
    AugmentedTooLong { required: usize, max: usize },

    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },

    #[error("frozen trace shape mismatch: {0}")]
    TraceShape(String),

    #[error("region mask out of range: {0}")]
    MaskOutOfRange(String),

    #[error("row {row} has every key masked at layer {layer}")]
    FullyMaskedRow { layer: usize, row: usize },

    #[error("exit layer {exit} out of range for a {layers}-layer model")]
    ExitLayerOutOfRange { exit: usize, layers: usize },

    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),

    #[error("empty position selection")]
    EmptySelection,

    #[error("text is empty or whitespace-only")]
    EmptyText,

    #[error("no sentences to partition")]
    NoSentences,

    #[error("too many blocks: {blocks} exceeds the reserved placeholder range of {max}")]
    TooManyBlocks { blocks: usize, max: usize },

    #[error("rewire plan covers {expected} positions but states have {found} rows")]
    PlanMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("size guard exceeded: {0}")]
    GuardExceeded(String),

    #[error("degenerate normalisation layer {0}: all scale parameters are zero")]
    DegenerateNorm(String),

    #[error("non-finite Jacobian entry for input position {position}")]
    NonFiniteJacobian { position: usize },

    #[error("zero-norm vector for id {id}")]
    ZeroNorm { id: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) | Error::Json(_) | Error::WeightFormat(_) | Error::Corpus(_) => {
                ErrorKind::Io
            }
            Error::NonFinite { .. }
            | Error::NonFiniteJacobian { .. }
            | Error::DegenerateNorm(_)
            | Error::ZeroNorm { .. }
            | Error::FullyMaskedRow { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Config,
        }
    }
}
