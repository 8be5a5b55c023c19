use std::path::PathBuf;

use thiserror::Error;

use crate::raster::RasterError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Nn(#[from] vqdetect_nn::NnError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("one-class contract violated: {0}")]
    OneClassViolation(String),
    #[error("split contract violated: {0}")]
    SplitContract(String),
    #[error("missing model for band {0}")]
    MissingBandModel(usize),
    #[error("channel mismatch: model expects {expected} channels, tile has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("empty calibration pool")]
    EmptyPool,
    #[error("calibration pool contains a generated-labeled score ({0})")]
    GeneratedInCalibration(String),
    #[error("score and thresholds share no band")]
    NoOverlappingBands,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("store already contains `{0}`")]
    NameCollision(String),
    #[error("perturbation family `{0}` appears in both training and unseen sets")]
    FamilyOverlap(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
