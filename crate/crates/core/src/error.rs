use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps to a stable short code (see [`Error::code`]) which the
/// command-line driver prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("scan carries no ground truth")]
    NoGroundTruth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("radial line at {angle_rad:.6} rad does not intersect the ellipse")]
    NoIntersection { angle_rad: f64 },
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("incomplete scan: {0}")]
    IncompleteScan(String),
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Machine-parsable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDimensions(_) => "InvalidDimensions",
            Error::Format(_) => "FormatError",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InfeasibleGeometry(_) => "InfeasibleGeometry",
            Error::NoGroundTruth => "NoGroundTruth",
            Error::Shape(_) => "ShapeError",
            Error::State(_) => "StateError",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::Frame(_) => "FrameError",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::NumericalFailure(_) => "NumericalFailure",
            Error::NoIntersection { .. } => "NoIntersection",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::IncompleteScan(_) => "IncompleteScan",
            Error::DatasetMismatch(_) => "DatasetMismatch",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "FormatError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
