use thiserror::Error;

/// Errors raised by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// A posterior draw maps outside the image of the intrinsic parameter space.
    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    /// Detection probability too small for rejection-based simulation or a
    /// finite log-likelihood.
    #[error("impractical selection: alpha = {alpha:e}")]
    ImpracticalSelection { alpha: f64 },

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("remap failed: all {0} draws infeasible")]
    RemapFailure(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by numerics or convergence rather than by
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Infeasible(_)
                | Error::EmptySupport(_)
                | Error::ImpracticalSelection { .. }
                | Error::Initialization(_)
                | Error::RemapFailure(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
