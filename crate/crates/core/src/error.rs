use std::path::PathBuf;

/// Errors raised across the library.
///
/// Variants follow the failure kinds callers need to tell apart: bad inputs
/// (`Dimension`, `Shape`, `Parameter`, `Validation`), empty geometry
/// (`EmptyRegion`, `EmptyObject`), protocol failures when querying a
/// multimodal model, and configuration mistakes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty region: mask has no nonzero pixels")]
    EmptyRegion,
    #[error("empty complement: no pixels outside the region remain to compare")]
    EmptyComplement,
    #[error("empty object: segmentation selected no pixels")]
    EmptyObject,
    #[error("degenerate box {0:?} after clamping")]
    DegenerateBox([f64; 4]),
    #[error("degenerate feature: zero-norm feature vector in view {view}")]
    DegenerateFeature { view: usize },
    #[error("protocol error in {stage}: {message} (raw response: {raw:?})")]
    Protocol {
        stage: String,
        message: String,
        raw: String,
    },
    #[error("pose estimation failed: {0}")]
    Estimation(String),
    #[error("non-finite value in loss term `{term}`")]
    Numeric { term: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn protocol(stage: &str, message: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::Protocol {
            stage: stage.to_string(),
            message: message.into(),
            raw: raw.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
