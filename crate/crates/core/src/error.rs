use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate segment: endpoint rays are parallel")]
    DegenerateSegment,

    #[error("{file}: {field}: {message}")]
    Load {
        file: PathBuf,
        field: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("incompatible state file: version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no usable data: {0}")]
    NoData(String),

    #[error("manhattan frame extraction failed: {0}")]
    ExtractionFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate homography warp: point mapped to infinity")]
    DegenerateWarp,

    #[error("empty quad: {0}")]
    EmptyQuad(String),

    #[error("under-constrained system: {0}")]
    UnderConstrained(String),

    #[error("line is behind camera {frame_id} for track {track_id}")]
    BehindCamera { track_id: usize, frame_id: u32 },

    #[error("non-finite residual: {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("export failed: {0}")]
    Export(String),

    #[error("missing stage output: {0}")]
    MissingStage(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse error class, used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(file: impl Into<PathBuf>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Stage { source, .. } => source.class(),
            Error::DegenerateSegment
            | Error::ExtractionFailure(_)
            | Error::DegenerateWarp
            | Error::UnderConstrained(_)
            | Error::BehindCamera { .. }
            | Error::NonFinite(_)
            | Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
