/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or index disagreement between inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A loss was requested over zero valid pixels.
    #[error("loss undefined: no valid pixels")]
    EmptyLoss,

    /// Invalid configuration value or missing configuration entry.
    #[error("configuration error: {0}")]
    Config(String),

    /// The polynomial decay schedule has no learning rate left.
    #[error("learning-rate schedule exhausted: iteration {iteration} >= max_iterations {max_iterations}")]
    ScheduleExhausted { iteration: usize, max_iterations: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },

    /// A numeric evaluation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Inputs violate a cross-map consistency requirement.
    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    /// Scene generation could not satisfy the requested layout.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// A search over a parameter grid had nothing to optimize.
    #[error("search failed: {0}")]
    Search(String),

    /// An API contract was violated (e.g. a stale forward cache).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
