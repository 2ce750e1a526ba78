//! Vectors in the joint image/text embedding space.

use ndarray::Array1;

use crate::error::{Error, Result};

/// A point (or direction) in the joint embedding space shared by the image
/// and text encoders of one backend.
///
/// The dimension is implicit in the length of `values`; operations that
/// combine two vectors check that the lengths agree and error otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Array1<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        EmbeddingVector { values: Array1::from_vec(values) }
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector { values: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        check_same_dim(self, other)?;
        Ok(self.values.dot(&other.values))
    }
}

pub(crate) fn check_same_dim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(())
}

/// Cosine similarity between two raw arrays.
///
/// Returns 0.0 when either input has zero norm; callers whose contract wants
/// a different degenerate convention (e.g. the alignment loss returning 1)
/// must test for the degenerate case before calling this.
pub fn cosine_similarity_arrays(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between two embedding vectors (dimension-checked).
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_same_dim(a, b)?;
    Ok(cosine_similarity_arrays(&a.values, &b.values))
}
