//! Content digests used for provenance and reproducibility records.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

/// Incremental SHA-256 digest rendered as a short hex string.
#[derive(Clone, Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.0.update(data);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(&(s.len() as u64).to_le_bytes()).bytes(s.as_bytes())
    }

    pub fn u32s(&mut self, ids: &[u32]) -> &mut Self {
        self.bytes(&(ids.len() as u64).to_le_bytes());
        for id in ids {
            self.0.update(id.to_le_bytes());
        }
        self
    }

    /// Values are hashed through their `f32` bit patterns so a model hashes
    /// identically before and after a checkpoint roundtrip.
    pub fn reals<T: crate::Real>(&mut self, values: &[T]) -> &mut Self {
        self.bytes(&(values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update((v.f64() as f32).to_bits().to_le_bytes());
        }
        self
    }

    /// First 16 bytes of the digest as lowercase hex.
    pub fn finish(&self) -> String {
        let digest = self.0.clone().finalize();
        let mut out = String::with_capacity(32);
        for b in digest.iter().take(16) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}
