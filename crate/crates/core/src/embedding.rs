//! Text encoders. The default is an offline feature-hashing bag of words;
//! remote embedding services plug in behind [`TextEncoder`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite embedding component")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// Set when the source text had no tokens; the vector is all zeros.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let empty = values.iter().all(|v| *v == 0.0);
        Ok(Self { values, empty })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    let dot = a.dot(b)?;
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

pub trait TextEncoder: Send + Sync {
    /// Identifies the encoder and its parameters; persisted banks carry it.
    fn version(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone)]
pub struct HashingEncoder {
    dim: usize,
    version: String,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim, version: format!("fnv1a-bow-v1-d{dim}") }
    }
}

impl Default for HashingEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl TextEncoder for HashingEncoder {
    fn version(&self) -> &str {
        &self.version
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            values[(fnv1a64(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashingEncoder::default();
        let a = e.encode("fractions addition").unwrap();
        assert_eq!(a, e.encode("fractions addition").unwrap());
        assert!((a.dot(&a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_flagged_zero() {
        let v = HashingEncoder::default().encode("  ,,, ").unwrap();
        assert!(v.empty);
        assert_eq!(v.norm(), 0.0);
        let other = HashingEncoder::default().encode("x").unwrap();
        assert_eq!(cosine(&v, &other).unwrap(), 0.0);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        // Values frozen from an independent script: the first pair shares no
        // bucket at D=256, the second shares two of three tokens (2/sqrt(6)).
        let e = HashingEncoder::default();
        let base = e.encode("fraction addition").unwrap();
        let far = cosine(&base, &e.encode("geometry proofs").unwrap()).unwrap();
        let near = cosine(&base, &e.encode("fraction addition drills").unwrap()).unwrap();
        assert!(far < near);
        assert_eq!(far, 0.0);
        assert!((near - 2.0 / 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = HashingEncoder::new(8).encode("a").unwrap();
        let b = HashingEncoder::new(16).encode("a").unwrap();
        assert_eq!(cosine(&a, &b), Err(EmbeddingError::DimensionMismatch(8, 16)));
    }
}
