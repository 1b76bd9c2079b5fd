use thiserror::Error;

use crate::ledger::LedgerError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A non-finite value appeared while evaluating the named layer.
    #[error("non-finite value in layer `{layer}`")]
    Numeric { layer: String },

    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl Error {
    pub fn is_oom(&self) -> bool {
        matches!(self, Error::Ledger(LedgerError::SimulatedOom { .. }))
    }

    pub(crate) fn numeric(layer: impl Into<String>) -> Self {
        Error::Numeric { layer: layer.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
