//! Embedding-space difference vectors, their spherical interpolation, and the
//! alignment loss that pulls trainable tokens toward an interpolated delta.

use ndarray::Array1;

use crate::embedding::{EmbeddingVector, check_same_dim, cosine_similarity_arrays};
use crate::error::{Error, Result};
use crate::limits::{DEGENERATE_NORM_EPS, SLERP_PARALLEL_EPS};

/// Where a delta came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaSource {
    /// Difference of two image embeddings.
    Image,
    /// Difference of two caption embeddings.
    Text,
    /// Spherical interpolation of an image delta and a text delta.
    Interpolated { alpha: f64 },
}

/// A direction in the joint embedding space describing "what changed"
/// between a before/after pair.
#[derive(Debug, Clone)]
pub struct Delta {
    pub direction: EmbeddingVector,
    pub source: DeltaSource,
    /// Set when the two source embeddings were (numerically) identical, i.e.
    /// the direction norm fell below [`DEGENERATE_NORM_EPS`].
    pub degenerate: bool,
    /// Set when spherical interpolation fell back to a linear blend because
    /// the inputs were parallel or antiparallel.
    pub lerp_fallback: bool,
}

impl Delta {
    pub fn dim(&self) -> usize {
        self.direction.dim()
    }

    pub fn norm(&self) -> f64 {
        self.direction.norm()
    }

    /// Unit-normalized copy of this delta. Degenerate deltas cannot be
    /// normalized and error instead.
    pub fn normalized(&self) -> Result<Delta> {
        let n = self.norm();
        if self.degenerate || n < DEGENERATE_NORM_EPS {
            return Err(Error::DegenerateDelta { context: source_name(self.source).to_string() });
        }
        Ok(Delta {
            direction: EmbeddingVector::new(&self.direction.values / n),
            source: self.source,
            degenerate: false,
            lerp_fallback: self.lerp_fallback,
        })
    }
}

fn source_name(source: DeltaSource) -> &'static str {
    match source {
        DeltaSource::Image => "image delta",
        DeltaSource::Text => "text delta",
        DeltaSource::Interpolated { .. } => "interpolated delta",
    }
}

fn difference(
    after: &EmbeddingVector,
    before: &EmbeddingVector,
    source: DeltaSource,
) -> Result<Delta> {
    check_same_dim(after, before)?;
    let direction = EmbeddingVector::new(&after.values - &before.values);
    let degenerate = direction.norm() < DEGENERATE_NORM_EPS;
    Ok(Delta { direction, source, degenerate, lerp_fallback: false })
}

/// Difference of two image embeddings: `after - before`.
///
/// A numerically zero difference (identical images) is returned with the
/// `degenerate` flag set rather than erroring, so callers can decide.
pub fn image_delta(after: &EmbeddingVector, before: &EmbeddingVector) -> Result<Delta> {
    difference(after, before, DeltaSource::Image)
}

/// Difference of two caption embeddings: `after - before`.
pub fn text_delta(after: &EmbeddingVector, before: &EmbeddingVector) -> Result<Delta> {
    difference(after, before, DeltaSource::Text)
}

/// Spherical linear interpolation between an image delta and a text delta.
///
/// With `theta` the angle between the two directions, the result is
///
/// ```text
/// sin((1 - alpha) * theta)           sin(alpha * theta)
/// ------------------------ * d_img + ------------------ * d_txt
///        sin(theta)                       sin(theta)
/// ```
///
/// `alpha = 0` returns the image delta exactly, `alpha = 1` the text delta.
/// When `sin(theta)` drops below [`SLERP_PARALLEL_EPS`] (parallel or
/// antiparallel inputs) the arc is ill-conditioned and the function falls
/// back to a linear blend, setting `lerp_fallback` on the result. For
/// antiparallel inputs near `alpha = 0.5` that blend can itself be
/// degenerate, which the `degenerate` flag then records.
pub fn slerp(d_img: &Delta, d_txt: &Delta, alpha: f64) -> Result<Delta> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { alpha });
    }
    for d in [d_img, d_txt] {
        if d.degenerate || d.norm() < DEGENERATE_NORM_EPS {
            return Err(Error::DegenerateDelta { context: source_name(d.source).to_string() });
        }
    }
    check_same_dim(&d_img.direction, &d_txt.direction)?;

    let a = &d_img.direction.values;
    let b = &d_txt.direction.values;
    let cos_theta = cosine_similarity_arrays(a, b);
    let theta = cos_theta.acos();

    let (values, lerp_fallback): (Array1<f64>, bool) = if theta.sin() < SLERP_PARALLEL_EPS {
        ((1.0 - alpha) * a + alpha * b, true)
    } else {
        let w_img = ((1.0 - alpha) * theta).sin() / theta.sin();
        let w_txt = (alpha * theta).sin() / theta.sin();
        (w_img * a + w_txt * b, false)
    };

    let direction = EmbeddingVector::new(values);
    let degenerate = direction.norm() < DEGENERATE_NORM_EPS;
    Ok(Delta {
        direction,
        source: DeltaSource::Interpolated { alpha },
        degenerate,
        lerp_fallback,
    })
}

fn require_nonzero_target(d_inter: &Delta) -> Result<()> {
    if d_inter.degenerate || d_inter.norm() < DEGENERATE_NORM_EPS {
        return Err(Error::DegenerateDelta { context: source_name(d_inter.source).to_string() });
    }
    Ok(())
}

/// Cosine distance between a token representation and a target delta:
/// `1 - cos(diff_repr, d_inter)`, in `[0, 2]`.
///
/// `diff_repr` is allowed to be zero — that happens at step 0 when the
/// trainable tokens start from all zeros — and then the loss is exactly the
/// neutral constant 1 (no direction to compare yet). The target delta must
/// be nonzero.
pub fn cosine_alignment_loss(diff_repr: &EmbeddingVector, d_inter: &Delta) -> Result<f64> {
    require_nonzero_target(d_inter)?;
    check_same_dim(diff_repr, &d_inter.direction)?;
    if diff_repr.norm() < DEGENERATE_NORM_EPS {
        return Ok(1.0);
    }
    Ok(1.0 - cosine_similarity_arrays(&diff_repr.values, &d_inter.direction.values))
}

/// Gradient of [`cosine_alignment_loss`] with respect to `diff_repr`.
///
/// Inside the degenerate ball (`norm < DEGENERATE_NORM_EPS`) the loss is the
/// constant 1, so no gradient flows: the zero vector is returned. Callers
/// probing with finite differences should stay clear of that ball.
pub fn cosine_alignment_grad(
    diff_repr: &EmbeddingVector,
    d_inter: &Delta,
) -> Result<Array1<f64>> {
    require_nonzero_target(d_inter)?;
    check_same_dim(diff_repr, &d_inter.direction)?;
    let r = &diff_repr.values;
    let v = &d_inter.direction.values;
    let nr = r.dot(r).sqrt();
    if nr < DEGENERATE_NORM_EPS {
        return Ok(Array1::zeros(r.len()));
    }
    let nv = v.dot(v).sqrt();
    let rv = r.dot(v);
    // d/dr [1 - (r.v)/(|r||v|)] = -v/(|r||v|) + (r.v) r / (|r|^3 |v|)
    Ok(-v / (nr * nv) + (rv / (nr.powi(3) * nv)) * r)
}
