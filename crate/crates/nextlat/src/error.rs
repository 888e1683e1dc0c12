//! Crate-wide error type. Shape mismatches between tensors are programming
//! errors and panic at the op site; everything data- or environment-driven
//! comes through here.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Token id outside the table, with the flat position it occurred at.
    Vocab { position: usize, id: u32, vocab: usize },
    /// A masked loss with no unmasked positions.
    EmptyLoss,
    /// Backward from a non-scalar root.
    NonScalarLoss(String),
    /// The NaN guard tripped: a loss or gradient stopped being finite.
    NonFinite(String),
    /// A prompt plus requested generation exceeds the model context.
    ContextOverflow { need: usize, max: usize },
    /// Bad run/experiment configuration (unknown key, bad value, missing field).
    Config(String),
    /// Dataset content violates the generator's contract.
    Dataset(String),
    /// Dataset file tokenizer hash does not match the tokenizer in use.
    TokenizerHash { expected: String, actual: String },
    /// Malformed file (dataset, checkpoint, manifest).
    Format(String),
    /// Generator could not satisfy its constraints (retry budget exhausted,
    /// infeasible shape parameters).
    Infeasible(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Vocab { position, id, vocab } => {
                write!(f, "token id {id} at position {position} is outside vocabulary of size {vocab}")
            }
            Error::EmptyLoss => write!(f, "loss over an entirely masked batch"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape}")
            }
            Error::NonFinite(ctx) => write!(f, "non-finite value: {ctx}"),
            Error::ContextOverflow { need, max } => {
                write!(f, "sequence of length {need} exceeds model context {max}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Error::TokenizerHash { expected, actual } => {
                write!(f, "tokenizer hash mismatch: file has {expected}, tokenizer in use is {actual}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
