use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    /// A caller violated an API precondition (shape mismatch, stale tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear system or factorization could not be completed.
    #[error("singular system: {0}")]
    Singular(String),

    /// The KKT system at a solution is too ill-conditioned to differentiate.
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    /// A QP was certified primal infeasible.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    /// Training produced non-finite losses or gradients at every learning rate tried.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// An iterative method exceeded its budget without meeting its tolerance.
    #[error("did not converge: {0}")]
    NoConvergence(String),

    /// A step-size problem made an iterate non-finite.
    #[error("step size produced a non-finite iterate: {0}")]
    StepSize(String),

    /// A serialized artifact could not be parsed.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
