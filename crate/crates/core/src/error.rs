use alloc::string::String;

/// Errors raised by the detection pipeline and its data generators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input data violates a documented precondition (shape, range, finiteness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two collaborating components disagree on a shape or dimensionality.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bayar kernels were used without being projected onto the constraint set.
    #[error("bayar constraint violated: {0}")]
    ConstraintViolation(String),

    /// An operation was invoked out of order.
    #[error("sequencing error: expected rectification stage {expected}, found {found}")]
    Sequencing { expected: usize, found: usize },

    /// A parameter the operation needs is absent from its store.
    #[error("uninitialized parameter `{0}`")]
    Uninitialized(String),

    /// A synthetic generator could not satisfy its placement constraints.
    #[error("generation failed after {attempts} attempts: {reason}")]
    GenerationFailure { attempts: usize, reason: String },

    /// The requested perturbation needs a codec that is not available.
    #[error("unsupported perturbation: {0}")]
    UnsupportedPerturbation(String),

    /// A proposal backend failed.
    #[error("proposal backend error: {0}")]
    Backend(String),

    /// A metric is undefined for the given input (e.g. AUC on a single-class mask).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;
