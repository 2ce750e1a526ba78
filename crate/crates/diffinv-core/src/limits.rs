//! Numerical thresholds shared across the workspace.
//!
//! Every cutoff that changes behaviour (as opposed to a test tolerance) lives
//! here so the conventions stay consistent between modules.

/// Below this Euclidean norm a difference vector is treated as zero.
///
/// Used for the degenerate-pair flag on deltas, the neutral value of the
/// alignment loss, and the degenerate flag on directional scores.
pub const DEGENERATE_NORM_EPS: f64 = 1e-8;

/// When `sin(theta)` between the two deltas falls below this, spherical
/// interpolation is ill-conditioned (parallel or antiparallel inputs) and we
/// fall back to a linear blend, flagging the result.
pub const SLERP_PARALLEL_EPS: f64 = 1e-6;

/// Guidance weights within this distance of 1.0 skip the unconditional
/// branch entirely, halving denoiser calls.
pub const GUIDANCE_NEUTRAL_EPS: f64 = 1e-12;
