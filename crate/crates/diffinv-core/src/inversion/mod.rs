//! Difference-token optimization: learn a small trainable token-embedding
//! matrix that captures the edit between a before/after image pair.
//!
//! [`loss`] defines the two training objectives (noise-prediction
//! consistency and alignment with the interpolated embedding delta) together
//! with their analytic gradients; [`optimize`](optimize()) runs the
//! gradient-descent loop and packages the result.

pub mod loss;
mod optimizer;

pub use loss::{
    LossBreakdown, LossContext, NoiseDraws, alignment_loss, alignment_loss_with_grad,
    consistency_loss, consistency_loss_with_grad, difference_representation, total_loss,
    total_loss_with_grad,
};
pub use optimizer::{InversionInputs, InversionOutcome, TraceRow, optimize};

use ndarray::Array2;

use crate::config::TokenMode;
use crate::error::{Error, Result};

/// The trainable difference tokens: an `n x token_dim` embedding matrix.
///
/// Appending these rows to a prompt steers generation toward the learned
/// edit; appending the negation steers away from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTokens {
    pub embeddings: Array2<f64>,
    pub mode: TokenMode,
    /// Number of optimizer updates applied so far.
    pub step_count: usize,
}

impl DiffTokens {
    /// Fresh all-zero tokens, the optimization starting point.
    pub fn init(n_tokens: usize, width: usize) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::InvalidConfig("difference tokens need at least one row".into()));
        }
        Ok(DiffTokens {
            embeddings: Array2::zeros((n_tokens, width)),
            mode: TokenMode::Soft,
            step_count: 0,
        })
    }

    /// Wrap an existing matrix (for loading artifacts); any row count is
    /// accepted, including zero for ablations that apply no tokens.
    pub fn from_matrix(embeddings: Array2<f64>, mode: TokenMode) -> Self {
        DiffTokens { embeddings, mode, step_count: 0 }
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Sign-flipped copy. Negation is an exact involution: applying it twice
    /// restores every element bit for bit.
    pub fn negated(&self) -> DiffTokens {
        DiffTokens {
            embeddings: self.embeddings.mapv(|x| -x),
            mode: self.mode,
            step_count: self.step_count,
        }
    }
}
