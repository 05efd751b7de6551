//! Crate-wide error type.
//!
//! Variants are grouped by the failure class the CLI maps to exit codes:
//! configuration/data problems (exit 2) versus numerical failures such as
//! divergence or singular fits (exit 3).

use std::path::PathBuf;

use thiserror::Error;

use crate::nn::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible array or matrix dimensions.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A scalar or structural argument failed validation.
    #[error("invalid {what}: {why}")]
    InvalidParameter { what: &'static str, why: String },

    /// A class label outside `[0, num_classes)`.
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// A group id outside `[0, num_groups)`.
    #[error("unknown group id {group}: dataset has {num_groups} groups")]
    UnknownGroup { group: usize, num_groups: usize },

    /// A class id outside `[0, num_classes)` or absent from the data.
    #[error("unknown class {class}: {why}")]
    UnknownClass { class: usize, why: String },

    /// A filter or slice produced no rows.
    #[error("empty selection in {context}: {why}")]
    EmptySelection { context: &'static str, why: String },

    /// Too few rows to satisfy a protocol's minimum counts.
    #[error("not enough data: {why}")]
    InsufficientData { why: String },

    /// Per-group label distributions cannot be matched.
    #[error("cannot match label distributions: {why}")]
    MatchedDistribution { why: String },

    /// Exact double backprop requested with an activation whose second
    /// derivative vanishes almost everywhere.
    #[error(
        "exact gradient-penalty backward requires a twice-differentiable \
         activation; {activation} is not supported (use the finite-difference \
         mode instead)"
    )]
    UnsupportedActivation { activation: &'static str },

    /// Training produced a non-finite loss. Carries the last finite
    /// checkpoint so callers can see how far the run got.
    #[error("training diverged at step {step}: loss became non-finite{}",
        last_checkpoint.as_ref().map(|c| format!(" (last finite checkpoint at step {}, loss {:.6})", c.step, c.loss)).unwrap_or_default())]
    Divergence {
        step: usize,
        last_checkpoint: Option<Box<Checkpoint>>,
    },

    /// Rank-deficient design matrix.
    #[error("singular design matrix: column {column:?} is linearly dependent on earlier columns{hint}")]
    SingularDesign { column: String, hint: String },

    /// Fewer rows than parameters in a regression.
    #[error("not enough degrees of freedom: {n} rows for {p} parameters")]
    DegreesOfFreedom { n: usize, p: usize },

    /// A quantity whose definition breaks down (zero-variance response,
    /// zero-norm mean, constant ranks, ...).
    #[error("degenerate input for {what}: {why}")]
    Degenerate { what: &'static str, why: String },

    /// A protocol result is missing a required piece.
    #[error("incomplete protocol output: {why}")]
    IncompleteProtocol { why: String },

    /// Filesystem failure, tagged with the path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are malformed.
    #[error("{}: {why}", path.display())]
    FileFormat { path: PathBuf, why: String },

    /// Bad experiment configuration.
    #[error("config error: {why}")]
    Config { why: String },

    /// A protocol condition failed; wraps the underlying error with the
    /// condition name and run index that was executing.
    #[error("{condition}, run {run}: {source}")]
    Condition {
        condition: String,
        run: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidParameter {
            what,
            why: why.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn file_format(path: impl Into<PathBuf>, why: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.into(),
            why: why.into(),
        }
    }

    pub(crate) fn config(why: impl Into<String>) -> Self {
        Error::Config { why: why.into() }
    }

    /// Closure that tags an error with the protocol condition and run index
    /// it occurred in; used as `result.map_err(Error::in_condition(...))`.
    pub(crate) fn in_condition(
        condition: impl Into<String>,
        run: usize,
    ) -> impl FnOnce(Error) -> Self {
        let condition = condition.into();
        move |source| Error::Condition {
            condition,
            run,
            source: Box::new(source),
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad
    /// configuration, data, or I/O). The CLI maps these to a distinct exit
    /// code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Divergence { .. }
            | Error::SingularDesign { .. }
            | Error::DegreesOfFreedom { .. }
            | Error::Degenerate { .. } => true,
            Error::Condition { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
