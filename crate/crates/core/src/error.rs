use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },

    #[error("degenerate projection: homogeneous scale {0:e} is too close to zero")]
    DegenerateProjection(f64),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("need at least {needed} correspondences for a {model} model, got {got}")]
    InsufficientMatches {
        model: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch at layer {index} ({kind}): {detail}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("tracker is not initialized")]
    Uninitialized,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed box on line {line} of {path}: {text:?}")]
    MalformedBox {
        path: PathBuf,
        line: usize,
        text: String,
    },

    #[error("frame count mismatch: {0}")]
    CountMismatch(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input data (missing files, malformed
    /// ground truth), as opposed to configuration or internal failures.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::MalformedBox { .. }
            | Error::CountMismatch(_)
            | Error::MissingFile(_)
            | Error::Image(_)
            | Error::Json(_)
            | Error::Io(_)
            | Error::InvalidBox { .. }
            | Error::DimensionMismatch(_)
            | Error::EmptyDataset
            | Error::Checkpoint(_)
            | Error::InvalidScenario(_) => true,
            Error::AtFrame { source, .. } => source.is_data_error(),
            _ => false,
        }
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::OutOfRange(_))
    }

    pub(crate) fn at_frame(self, frame: usize) -> Error {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }
}
