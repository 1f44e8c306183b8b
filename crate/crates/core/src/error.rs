//! Error taxonomy for graph construction, numerics, and data ingestion.

use thiserror::Error;

/// Errors across the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A symmetric factorization failed even after the jitter retry.
    #[error("matrix is not symmetric positive definite (size {n}x{n}, pivot {pivot})")]
    NotSpd { n: usize, pivot: usize },

    /// Operand dimensions disagree.
    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch { context: &'static str, expected: usize, got: usize },

    /// A factor referenced a variable id that does not exist.
    #[error("unknown variable id {0}")]
    UnknownVariable(usize),

    /// A factor was given a neighbor list whose length differs from its arity.
    #[error("arity mismatch: factor expects {expected} neighbors, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    /// A belief had non-positive precision where a MAP estimate was required.
    #[error("degenerate belief on variable {0} (non-positive precision)")]
    DegenerateBelief(usize),

    /// Jacobian evaluation produced a non-finite entry.
    #[error("non-finite Jacobian entry in factor {0}")]
    NonFiniteJacobian(usize),

    /// The (V−1)-dimensional marginalization system could not be solved.
    #[error("singular subsystem while marginalizing factor {0}")]
    SingularSubsystem(usize),

    /// An incoming message carried zero or negative precision, so the fast
    /// marginalization path (which divides by it) does not apply.
    #[error("factor {0}: incoming message precision is not positive")]
    ZeroIncomingPrecision(usize),

    /// A class label was outside the model's class count.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Configuration value outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Dataset/posterior shape does not match the model spec.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Stored posterior belongs to a different model spec.
    #[error("fingerprint mismatch: posterior built for {stored}, model is {actual}")]
    FingerprintMismatch { stored: String, actual: String },

    /// Data file problems (IDX / PNM / CSV fixtures).
    #[error(transparent)]
    Data(#[from] crate::data::DataError),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, CoreError>;
