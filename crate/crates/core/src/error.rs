use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid quantum numbers, angles, or other out-of-domain inputs.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    /// A caller broke an operation's contract (grid mismatch, wrong basis, unseparated beams).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("step size too large: max|V|·dt/ħ = {phase:.3} exceeds {limit}")]
    StepSize { phase: f64, limit: f64 },

    #[error("trajectory left the domain at t = {time}")]
    Escape { time: f64 },

    #[error("grid does not cover the ensemble: out-of-range mass {out_of_range_mass:.3e}")]
    Coverage { out_of_range_mass: f64 },

    #[error("phase decomposition failed: nodes near q = {nodes:?}")]
    Decomposition { nodes: Vec<f64> },

    #[error("branch sigma = {sigma} carries no population")]
    EmptyBranch { sigma: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
