use thiserror::Error;

use crate::wire::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands do not share a layer layout, or a tensor has the wrong shape.
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// A NaN or infinity appeared somewhere it must not.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Rank selection on a spectrum with zero total energy.
    #[error("degenerate input: all singular values are zero")]
    DegenerateSpectrum,

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Violation of the synchronous round protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: usize, reason: String },

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
