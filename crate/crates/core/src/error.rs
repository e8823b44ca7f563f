use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("non-finite values in {0}")]
    NonFiniteValues(String),
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape overflow: {0}")]
    ShapeOverflow(String),
    #[error("missing frame file {0}")]
    MissingFrameFile(PathBuf),
    #[error("exposures do not alternate between two values: {0:?}")]
    NonAlternatingExposures(Vec<f64>),
    #[error("sequence needs at least 3 frames, got {0}")]
    FewerThanThreeFrames(usize),
    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("exposure must be positive, got {0}")]
    NonPositiveExposure(f64),
    #[error("gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("negative input value {0}")]
    NegativeInput(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint missing: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("ground-truth file missing: {0}")]
    MissingGroundTruth(PathBuf),
    #[error("result file missing: {0}")]
    MissingResult(PathBuf),
    #[error("ingest flow file missing: {0}")]
    IngestFileMissing(PathBuf),
    #[error("missing parameter tensor {0}")]
    MissingParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short name of the variant, used in diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BadMagic(_) => "BadMagic",
            Error::BadHeader(_) => "BadHeader",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::NonFiniteValues(_) => "NonFiniteValues",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ShapeOverflow(_) => "ShapeOverflow",
            Error::MissingFrameFile(_) => "MissingFrameFile",
            Error::NonAlternatingExposures(_) => "NonAlternatingExposures",
            Error::FewerThanThreeFrames(_) => "FewerThanThreeFrames",
            Error::BadManifest { .. } => "BadManifest",
            Error::NonPositiveExposure(_) => "NonPositiveExposure",
            Error::NonPositiveGamma(_) => "NonPositiveGamma",
            Error::NegativeInput(_) => "NegativeInput",
            Error::DimMismatch(_) => "DimMismatch",
            Error::MissingCheckpoint(_) => "MissingCheckpoint",
            Error::MissingGroundTruth(_) => "MissingGroundTruth",
            Error::MissingResult(_) => "MissingResult",
            Error::IngestFileMissing(_) => "IngestFileMissing",
            Error::MissingParams(_) => "MissingParams",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DuplicateParam(_) => "DuplicateParam",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Png(_) => "Png",
            Error::Io(_) => "Io",
        }
    }
}
