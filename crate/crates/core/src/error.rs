use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("points are collinear; no unique plane")]
    Collinear,
    #[error("point set is degenerate (collinear or coincident)")]
    Degenerate,
    #[error("unknown scene preset `{0}`")]
    UnknownPreset(String),
    #[error("ray origin {0:?} is outside the room shell")]
    OriginOutsideRoom([f64; 3]),
    #[error("invalid field of view: {0} degrees")]
    InvalidFov(f64),
    #[error("pixel ({x}, {y}) outside a {width}x{height} image")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("station {station} at ({x:.3}, {y:.3}) is outside the room or closer than the wall margin")]
    StationOutsideRoom { station: usize, x: f64, y: f64 },
    #[error("depth {depth} m exceeds the 16-bit range at scale {scale}")]
    DepthOverflow { depth: f64, scale: f64 },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("view {0} has a non-rigid camera-to-world matrix")]
    NonRigidPose(usize),
    #[error("floor plane is ambiguous: {0} candidate planes intersect the floor ray")]
    AmbiguousFloor(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sampling bounds near={near} far={far} n={n}")]
    InvalidBounds { near: f64, far: f64, n: usize },
    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty mask")]
    EmptyMask,
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("dataset has no prior maps; run the priors step first")]
    MissingPriors,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
