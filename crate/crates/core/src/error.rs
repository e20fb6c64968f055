use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("qubit-like eigenmode is ambiguous (largest qubit weight {weight:.3}); qubit is hybridised with the resonator")]
    AmbiguousQubitMode { weight: f64 },

    #[error("linear system is singular: {0}")]
    Singular(&'static str),

    #[error("unstable dynamics: eigenvalue with positive real part {0:e}")]
    Unstable(f64),

    #[error("no fundamental mode in search window [{lo:e}, {hi:e}] rad/s")]
    NoFundamentalMode { lo: f64, hi: f64 },

    #[error("root search did not converge: residual {residual:e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    #[error("traces do not share a time grid: {0}")]
    GridMismatch(String),

    #[error("trace too short: fields at the end are {ratio:e} of their peak (need < {limit:e})")]
    TraceTooShort { ratio: f64, limit: f64 },

    #[error("no state information: ground and excited responses are identical")]
    NoStateInformation,

    #[error("unphysical measurement efficiency {0:.4} (> 1)")]
    UnphysicalEfficiency(f64),

    #[error("fit did not converge: {0}")]
    FitDidNotConverge(String),

    #[error("no dip detected in spectrum")]
    NoDip,

    #[error("preparation row {0} has no heralded shots")]
    MissingPreparation(usize),

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to rejected
    /// input. The command-line front end maps this to its exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::InvalidParameter(_)
            | Error::GridMismatch(_)
            | Error::MissingPreparation(_)
            | Error::NoDip => false,
            Error::Row { source, .. } => source.is_numerical(),
            _ => true,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
