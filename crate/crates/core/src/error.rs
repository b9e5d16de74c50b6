use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pose/shape mismatch: {0}")]
    PoseShape(String),

    #[error("rig format error in `{field}`: {reason}")]
    RigFormat { field: String, reason: String },

    #[error("degenerate triangle at face {face}")]
    DegenerateTriangle { face: usize },

    #[error("gaussian initialisation failed: {0}")]
    Init(String),

    #[error("non-finite parameter on gaussian {index}")]
    NonFiniteGaussian { index: usize },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error at {frame}: {reason}")]
    Dataset { frame: String, reason: String },

    #[error("pose fit diverged at iteration {iteration}")]
    FitDiverged { iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn rig(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::RigFormat {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dataset(frame: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            frame: frame.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGaussian { .. }
                | Error::NonFiniteGradient { .. }
                | Error::FitDiverged { .. }
        )
    }
}
