use thiserror::Error;

pub type Result<T, E = IqaError> = std::result::Result<T, E>;

/// Errors raised anywhere in the quality-assessment pipeline.
#[derive(Debug, Error)]
pub enum IqaError {
    #[error("patch exceeds image: patch {patch} px, image {width}x{height}")]
    PatchExceedsImage { patch: usize, width: usize, height: usize },

    #[error("invalid pixel data")]
    InvalidPixelData,

    #[error("layout has no pixel geometry (loaded from a feature cache)")]
    MissingGeometry,

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload")]
    TruncatedPayload,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("degenerate embedding at node {node}")]
    DegenerateEmbedding { node: usize },

    #[error("k too large: k = {k} with {n} nodes")]
    KTooLarge { k: usize, n: usize },

    #[error("numerical blow-up in {location}")]
    NumericalBlowUp { location: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("correlation needs >= 2 samples")]
    CorrelationNeedsTwo,

    #[error("zero variance")]
    ZeroVariance,

    #[error("zero rank variance")]
    ZeroRankVariance,

    #[error("loss term `{0}` has no EMA scale yet")]
    UninitializedTerm(&'static str),

    #[error("degenerate MOS distribution")]
    DegenerateMos,

    #[error("empty checkpoint history")]
    EmptyHistory,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IqaError {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        IqaError::ShapeMismatch {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by non-finite or otherwise unstable numerics.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IqaError::NumericalBlowUp { .. }
                | IqaError::ZeroVariance
                | IqaError::ZeroRankVariance
                | IqaError::DegenerateEmbedding { .. }
        )
    }
}
