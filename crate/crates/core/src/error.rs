use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: face has {count} vertices, only triangles are supported")]
    NonTriangleFace {
        path: String,
        line: usize,
        count: usize,
    },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("vertex index {index} out of range for mesh with {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("face {face} has zero area")]
    DegenerateFace { face: usize },
    #[error("1-ring of vertex {vertex} is degenerate (rank-deficient Gram matrix)")]
    DegenerateRing { vertex: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("rotation axis ambiguous near pi (angle {angle})")]
    AxisAmbiguousNearPi { angle: f64 },
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("landmarks are collinear or coincident")]
    DegenerateLandmarks,
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("weight vector has length {got}, expected {expected}")]
    WeightCount { got: usize, expected: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
