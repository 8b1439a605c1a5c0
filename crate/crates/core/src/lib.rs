//! Core algorithms for multi-dimensional text style transfer.
//!
//! Everything in this crate is pure computation over in-memory data: subword
//! tokenization, corpus noising, a small transformer with hand-written
//! backpropagation, language-model discriminators, REINFORCE-guided
//! encoder-decoder training and the evaluation metrics. File formats, corpus
//! loading and the command line live in the `style-forge` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod discriminator;
mod error;
pub mod eval;
pub mod hash;
pub mod model;
pub mod real;
pub mod tokenizer;
pub mod transfer;

pub use error::{Error, Result};
pub use real::Real;

/// Deterministic random number generator used across the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
