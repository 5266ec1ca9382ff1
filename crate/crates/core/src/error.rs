use thiserror::Error;

use crate::numkit::NumError;

/// Errors raised by the backbone, decoder and model wiring.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {needed} distinct patches, found {found}")]
    Cardinality { needed: usize, found: usize },
    #[error("masked set is empty; the batch carries no prediction target")]
    DegenerateBatch,
    #[error("{segments} ground-truth segments exceed {queries} queries")]
    Capacity { segments: usize, queries: usize },
}
