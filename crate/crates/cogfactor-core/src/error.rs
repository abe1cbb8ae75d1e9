//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the core numerical routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions do not line up.
    ShapeMismatch { expected: String, got: String },
    /// The dictionary Gram matrix is singular or its condition number
    /// exceeds the requested `1/rcond` cutoff.
    GramSingular { condition: f64, rcond: f64 },
    /// A dictionary violates its invariants (negative entry, zero column).
    InvalidDictionary(String),
    /// Referenced study index has no registered head or dataset.
    UnknownStudy { study: usize, n_studies: usize },
    /// A class label lies outside `[0, k)`.
    LabelOutOfRange { label: usize, n_classes: usize },
    /// Dropout rate outside `[0, 1)`.
    InvalidRate(f64),
    /// A gradient entry is NaN or infinite.
    NonFiniteGradient,
    /// A scheduled study has no samples.
    EmptyStudy { study: usize },
    /// Not enough distinct subjects for the requested split or subsample.
    TooFewSubjects { available: usize, requested: usize },
    /// Not enough samples for the requested clustering.
    TooFewSamples { available: usize, requested: usize },
    /// A configuration value is out of its documented range.
    InvalidConfig(String),
    /// Variants 5-6 of the ablation need auxiliary studies.
    MissingAuxiliary(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::GramSingular { condition, rcond } => write!(
                f,
                "gram matrix is singular or ill-conditioned \
                 (condition {condition:.3e} exceeds 1/rcond = {:.3e})",
                1.0 / rcond
            ),
            Error::InvalidDictionary(msg) => write!(f, "invalid dictionary: {msg}"),
            Error::UnknownStudy { study, n_studies } => {
                write!(f, "unknown study {study} (model has {n_studies} heads)")
            }
            Error::LabelOutOfRange { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            Error::InvalidRate(r) => write!(f, "dropout rate {r} outside [0, 1)"),
            Error::NonFiniteGradient => write!(f, "gradient contains a non-finite value"),
            Error::EmptyStudy { study } => write!(f, "study {study} has no samples"),
            Error::TooFewSubjects { available, requested } => {
                write!(f, "{requested} subjects requested but only {available} available")
            }
            Error::TooFewSamples { available, requested } => {
                write!(f, "{requested} samples required but only {available} available")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::MissingAuxiliary(msg) => write!(f, "missing auxiliary study: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
