//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A token id falls outside its vocabulary.
    #[error("{what} id {id} out of range (vocabulary size {limit})")]
    TokenRange {
        what: &'static str,
        id: u32,
        limit: u32,
    },

    /// An acoustic code word recombines to a value outside the semantic
    /// vocabulary, so it is not the image of any semantic id.
    #[error(
        "acoustic code at position {position} recombines to {recombined}, \
         outside the semantic vocabulary of size {limit}"
    )]
    NonImageCode {
        position: usize,
        recombined: u32,
        limit: u32,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("condition error: {0}")]
    Condition(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
