use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} is outside a vocabulary of {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("attention mode mismatch: operation needs a {expected} model")]
    Mode { expected: &'static str },
    #[error("batch has no prediction targets")]
    DegenerateBatch,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("sampler produced an empty sequence twice")]
    DegenerateSample,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
