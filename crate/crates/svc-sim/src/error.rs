//! Crate-wide error type.
//!
//! Numeric guards (non-finite inputs, singular matrices, degenerate
//! alignments) and structural guards (dimension mismatches, invalid
//! configuration) share one enum so the scenario engine can annotate any
//! failure with the simulation time at which it occurred.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The reduced reactive-power sensitivity matrix could not be solved
    /// against, or its solution residual exceeded the configured tolerance.
    #[error("singular sensitivity model: {0}")]
    SingularModel(String),

    /// The alignment dot product s·pf is within the degeneracy tolerance of
    /// zero, so no finite alignment constant exists.
    #[error("degenerate alignment: |s·pf| = {0:e} is below the degeneracy tolerance")]
    DegenerateAlignment(f64),

    /// An operation that needs at least one participating (or connected)
    /// generator was invoked with an empty active set.
    #[error("no active generator in mask")]
    NoActiveGenerator,

    /// The differentiator window has not filled yet; no estimate exists.
    #[error("differentiator window not yet full")]
    NotReady,

    /// A measurement pushed into a differentiator was NaN or infinite.
    #[error("non-finite sample: {0}")]
    NonFiniteSample(f64),

    /// An arithmetic input (gain, estimate, error term) was NaN or infinite.
    #[error("non-finite input: {0}")]
    NonFiniteInput(f64),

    /// A vector or matrix argument disagreed with the generator count.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// settling_time was handed an empty series.
    #[error("empty series")]
    EmptySeries,

    /// A configuration value violated a documented invariant.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    /// A scenario document failed to parse.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// A module error that occurred while the scenario engine was running,
    /// annotated with the simulation time.
    #[error("at t = {t} s: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a [`Error::Validation`] value.
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the simulation time at which it surfaced.
    pub fn at_time(t: f64, source: Error) -> Self {
        Error::AtTime {
            t,
            source: Box::new(source),
        }
    }
}
