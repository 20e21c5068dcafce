use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch on axis `{axis}`: expected {expected}, got {got}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid dictionary entry {index}: {reason}")]
    InvalidDictionaryEntry { index: usize, reason: String },

    #[error("non-physical tissue parameters at voxel {voxel:?}: {reason}")]
    NonPhysical {
        voxel: [usize; 3],
        reason: String,
    },

    #[error("coordinate {index} out of range [0, 1]: {value:?}")]
    CoordinateOutOfRange { index: usize, value: [f64; 3] },

    #[error("missing field for map `{0}`")]
    MissingField(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("ADMM diverged after {iters} iterations (primal residual trace {trace:?})")]
    AdmmDiverged { iters: usize, trace: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("file format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
