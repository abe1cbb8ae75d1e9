//! Error type for the IO and harness layer.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// NDT container format violations.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes, expected \"NDT1\"")]
    BadMagic,
    #[error("truncated file: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: u64, found: u64 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("trailing bytes after the payload")]
    TrailingData,
    #[error("tensor of shape {shape:?} does not fit in memory")]
    Oversized { shape: Vec<u64> },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cogfactor_core::Error),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format { path: path.into(), source }
    }

    /// Stable machine-readable discriminant, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(core) => match core {
                cogfactor_core::Error::ShapeMismatch { .. } => "shape_mismatch",
                cogfactor_core::Error::GramSingular { .. } => "gram_singular",
                cogfactor_core::Error::InvalidDictionary(_) => "invalid_dictionary",
                cogfactor_core::Error::UnknownStudy { .. } => "unknown_study",
                cogfactor_core::Error::LabelOutOfRange { .. } => "label_out_of_range",
                cogfactor_core::Error::InvalidRate(_) => "invalid_rate",
                cogfactor_core::Error::NonFiniteGradient => "non_finite_gradient",
                cogfactor_core::Error::EmptyStudy { .. } => "empty_study",
                cogfactor_core::Error::TooFewSubjects { .. } => "too_few_subjects",
                cogfactor_core::Error::TooFewSamples { .. } => "too_few_samples",
                cogfactor_core::Error::InvalidConfig(_) => "invalid_config",
                cogfactor_core::Error::MissingAuxiliary(_) => "missing_auxiliary",
            },
            Error::Format { source, .. } => match source {
                FormatError::BadMagic => "bad_magic",
                FormatError::TruncatedFile { .. } => "truncated_file",
                FormatError::UnsupportedDtype(_) => "unsupported_dtype",
                FormatError::TrailingData => "trailing_data",
                FormatError::Oversized { .. } => "oversized",
            },
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Invalid(_) => "invalid_input",
        }
    }
}
