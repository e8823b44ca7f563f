//! Error classes and their process exit codes.

use std::fmt;

use f2hdr::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Config(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Exit status per error class. Argument parsing errors exit with 2.
pub mod code {
    pub const IO: i32 = 3;
    pub const MALFORMED_FILE: i32 = 4;
    pub const INVALID_INPUT: i32 = 5;
    pub const MISSING_FILE: i32 = 6;
    pub const SHAPE: i32 = 7;
    pub const CONFIG: i32 = 8;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => code::CONFIG,
            CliError::Core(e) => match e {
                Error::Io(_) => code::IO,
                Error::BadMagic(_)
                | Error::BadHeader(_)
                | Error::TruncatedFile(_)
                | Error::NonFiniteValues(_)
                | Error::VersionMismatch { .. }
                | Error::ShapeOverflow(_)
                | Error::Png(_) => code::MALFORMED_FILE,
                Error::NonAlternatingExposures(_)
                | Error::FewerThanThreeFrames(_)
                | Error::BadManifest { .. }
                | Error::NonPositiveExposure(_)
                | Error::NonPositiveGamma(_)
                | Error::NegativeInput(_) => code::INVALID_INPUT,
                Error::MissingFrameFile(_)
                | Error::IngestFileMissing(_)
                | Error::MissingCheckpoint(_)
                | Error::MissingGroundTruth(_)
                | Error::MissingResult(_) => code::MISSING_FILE,
                Error::DimMismatch(_) | Error::MissingParams(_) | Error::ShapeMismatch(_) | Error::DuplicateParam(_) => {
                    code::SHAPE
                }
                Error::InvalidConfig(_) => code::CONFIG,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "InvalidConfig",
        }
    }

    /// The single diagnostic line printed on failure.
    pub fn diagnostic(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("f2hdr: error[{}] exit={}: {msg}", self.kind(), self.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
