//! Training objectives for difference tokens and their analytic gradients.
//!
//! Two terms are combined:
//!
//! * a noise-prediction **consistency** term — with the tokens appended
//!   (positively) to the before-image's prompt the denoiser must reconstruct
//!   the noise added to the after image, and with the negated tokens
//!   appended to the after-image's prompt it must reconstruct the noise
//!   added to the before image — so `+tokens` means "apply the edit" and
//!   `-tokens` means "undo it";
//! * an **alignment** term — one minus the cosine between a joint-space
//!   representation of the tokens and the interpolated before/after
//!   embedding delta.
//!
//! Gradients flow through backend-provided vector-Jacobian products, so the
//! same code differentiates any backend exposing them.

use ndarray::{Array2, Axis, concatenate};
use rand::Rng;

use crate::backends::{BackendBundle, Latent};
use crate::config::ClipBridge;
use crate::delta::{Delta, cosine_alignment_grad, cosine_alignment_loss};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::limits::DEGENERATE_NORM_EPS;

/// One iteration's stochastic draws: a timestep and a noise latent for each
/// side of the pair. Passing them explicitly keeps every loss evaluation
/// reproducible and lets tests mirror the draws exactly.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub t_before: usize,
    pub eps_before: Latent,
    pub t_after: usize,
    pub eps_after: Latent,
}

impl NoiseDraws {
    /// Draw timesteps uniformly from `[range.0, range.1)` and standard
    /// normal noise latents, in a fixed order for determinism.
    pub fn sample(rng: &mut impl Rng, range: (usize, usize), latent_shape: &[usize]) -> Self {
        let t_before = rng.random_range(range.0..range.1);
        let eps_before = Latent::standard_normal(latent_shape, rng);
        let t_after = rng.random_range(range.0..range.1);
        let eps_after = Latent::standard_normal(latent_shape, rng);
        NoiseDraws { t_before, eps_before, t_after, eps_after }
    }

    /// The same draws with the before/after roles exchanged.
    pub fn mirrored(&self) -> Self {
        NoiseDraws {
            t_before: self.t_after,
            eps_before: self.eps_after.clone(),
            t_after: self.t_before,
            eps_after: self.eps_before.clone(),
        }
    }
}

/// Stack an anchor prompt and (sign-scaled) token rows into one condition
/// matrix.
fn stacked_condition(anchor: &Array2<f64>, tokens: &Array2<f64>, sign: f64) -> Result<Array2<f64>> {
    if anchor.ncols() != tokens.ncols() {
        return Err(Error::TokenWidthMismatch { expected: anchor.ncols(), got: tokens.ncols() });
    }
    let scaled = tokens.mapv(|x| sign * x);
    concatenate(Axis(0), &[anchor.view(), scaled.view()])
        .map_err(|e| Error::InvalidConfig(format!("condition stacking failed: {e}")))
}

fn consistency_inner(
    bundle: &BackendBundle,
    anchor_before: &Array2<f64>,
    anchor_after: &Array2<f64>,
    z_before: &Latent,
    z_after: &Latent,
    token_rows: &Array2<f64>,
    draws: &NoiseDraws,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    // Reconstruct the before-image's noise from the after prompt with the
    // edit removed (negated tokens). Each term is the plain Euclidean norm
    // of the residual.
    let noised_before = bundle.add_noise(z_before, draws.t_before, &draws.eps_before)?;
    let cond_before = stacked_condition(anchor_after, token_rows, -1.0)?;
    let pred_before = bundle.predict_noise(&noised_before, draws.t_before, &cond_before)?;
    let resid_before = Latent::new(&pred_before.values - &draws.eps_before.values);
    let term_before = resid_before.l2_norm();

    // Reconstruct the after-image's noise from the before prompt with the
    // edit applied (positive tokens).
    let noised_after = bundle.add_noise(z_after, draws.t_after, &draws.eps_after)?;
    let cond_after = stacked_condition(anchor_before, token_rows, 1.0)?;
    let pred_after = bundle.predict_noise(&noised_after, draws.t_after, &cond_after)?;
    let resid_after = Latent::new(&pred_after.values - &draws.eps_after.values);
    let term_after = resid_after.l2_norm();

    let value = term_before + term_after;
    if !want_grad {
        return Ok((value, None));
    }

    // d‖r‖/d(prediction) = r/‖r‖; a perfectly reconstructed residual has no
    // direction to improve in, so its term contributes no gradient.
    let norm_grad = |resid: &Latent, norm: f64| -> Latent {
        if norm < DEGENERATE_NORM_EPS {
            Latent::zeros(resid.values.shape())
        } else {
            Latent::new(&resid.values / norm)
        }
    };
    let up_before = norm_grad(&resid_before, term_before);
    let full_before =
        bundle.predict_noise_vjp(&noised_before, draws.t_before, &cond_before, &up_before)?;
    let up_after = norm_grad(&resid_after, term_after);
    let full_after =
        bundle.predict_noise_vjp(&noised_after, draws.t_after, &cond_after, &up_after)?;

    // Token rows sit below the anchor rows; the before-term saw them negated.
    let n_anchor_before_term = anchor_after.nrows();
    let n_anchor_after_term = anchor_before.nrows();
    let slice_before = full_before.slice(ndarray::s![n_anchor_before_term.., ..]);
    let slice_after = full_after.slice(ndarray::s![n_anchor_after_term.., ..]);
    let grad = &slice_after.to_owned() - &slice_before;
    Ok((value, Some(grad)))
}

/// The noise-prediction consistency objective (sum of both direction terms).
pub fn consistency_loss(
    bundle: &BackendBundle,
    anchor_before: &Array2<f64>,
    anchor_after: &Array2<f64>,
    z_before: &Latent,
    z_after: &Latent,
    token_rows: &Array2<f64>,
    draws: &NoiseDraws,
) -> Result<f64> {
    consistency_inner(
        bundle,
        anchor_before,
        anchor_after,
        z_before,
        z_after,
        token_rows,
        draws,
        false,
    )
    .map(|(v, _)| v)
}

/// [`consistency_loss`] plus its gradient with respect to the token rows.
pub fn consistency_loss_with_grad(
    bundle: &BackendBundle,
    anchor_before: &Array2<f64>,
    anchor_after: &Array2<f64>,
    z_before: &Latent,
    z_after: &Latent,
    token_rows: &Array2<f64>,
    draws: &NoiseDraws,
) -> Result<(f64, Array2<f64>)> {
    let (v, g) = consistency_inner(
        bundle,
        anchor_before,
        anchor_after,
        z_before,
        z_after,
        token_rows,
        draws,
        true,
    )?;
    Ok((v, g.expect("gradient requested")))
}

/// Map token rows into the joint embedding space for the alignment term.
///
/// `Encode` feeds the rows to the text encoder as-is; `MeanpoolProject`
/// pools them into a single pseudo-token first and encodes that. Both paths
/// are differentiable through the backend's encoder.
pub fn difference_representation(
    bundle: &BackendBundle,
    token_rows: &Array2<f64>,
    bridge: ClipBridge,
) -> Result<EmbeddingVector> {
    match bridge {
        ClipBridge::Encode => bundle.encode_rows(token_rows),
        ClipBridge::MeanpoolProject => bundle.encode_rows(&meanpool(token_rows)?),
    }
}

fn meanpool(token_rows: &Array2<f64>) -> Result<Array2<f64>> {
    let pooled = token_rows
        .mean_axis(Axis(0))
        .ok_or(Error::EmptyInput { what: "difference token rows" })?;
    Ok(pooled.insert_axis(Axis(0)))
}

/// One minus the cosine between the tokens' joint-space representation and
/// the target delta.
pub fn alignment_loss(
    bundle: &BackendBundle,
    token_rows: &Array2<f64>,
    target: &Delta,
    bridge: ClipBridge,
) -> Result<f64> {
    let repr = difference_representation(bundle, token_rows, bridge)?;
    cosine_alignment_loss(&repr, target)
}

/// [`alignment_loss`] plus its gradient with respect to the token rows.
pub fn alignment_loss_with_grad(
    bundle: &BackendBundle,
    token_rows: &Array2<f64>,
    target: &Delta,
    bridge: ClipBridge,
) -> Result<(f64, Array2<f64>)> {
    let repr = difference_representation(bundle, token_rows, bridge)?;
    let value = cosine_alignment_loss(&repr, target)?;
    let upstream = cosine_alignment_grad(&repr, target)?;
    let grad = match bridge {
        ClipBridge::Encode => bundle.encode_rows_vjp(token_rows, &upstream)?,
        ClipBridge::MeanpoolProject => {
            let pooled = meanpool(token_rows)?;
            let pooled_grad = bundle.encode_rows_vjp(&pooled, &upstream)?;
            let n = token_rows.nrows() as f64;
            // Each original row contributes 1/n to the pooled row.
            Array2::from_shape_fn(token_rows.raw_dim(), |(_, j)| pooled_grad[[0, j]] / n)
        }
    };
    Ok((value, grad))
}

/// Everything a single loss evaluation needs besides the token rows and the
/// iteration's noise draws.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub anchor_before: &'a Array2<f64>,
    pub anchor_after: &'a Array2<f64>,
    pub z_before: &'a Latent,
    pub z_after: &'a Latent,
    pub target: &'a Delta,
    pub lambda_consistency: f64,
    pub lambda_alignment: f64,
    pub bridge: ClipBridge,
}

/// The two loss terms and their weighted sum for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub consistency: f64,
    pub alignment: f64,
    pub total: f64,
}

fn combine(ctx: &LossContext<'_>, consistency: f64, alignment: f64) -> LossBreakdown {
    // The exact expression recorded in traces and recomputable from them.
    let total = ctx.lambda_consistency * consistency + ctx.lambda_alignment * alignment;
    LossBreakdown { consistency, alignment, total }
}

/// The full training objective for one iteration.
pub fn total_loss(
    bundle: &BackendBundle,
    ctx: &LossContext<'_>,
    token_rows: &Array2<f64>,
    draws: &NoiseDraws,
) -> Result<LossBreakdown> {
    let consistency = consistency_loss(
        bundle,
        ctx.anchor_before,
        ctx.anchor_after,
        ctx.z_before,
        ctx.z_after,
        token_rows,
        draws,
    )?;
    let alignment = alignment_loss(bundle, token_rows, ctx.target, ctx.bridge)?;
    Ok(combine(ctx, consistency, alignment))
}

/// [`total_loss`] plus its gradient with respect to the token rows.
pub fn total_loss_with_grad(
    bundle: &BackendBundle,
    ctx: &LossContext<'_>,
    token_rows: &Array2<f64>,
    draws: &NoiseDraws,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let (consistency, g_c) = consistency_loss_with_grad(
        bundle,
        ctx.anchor_before,
        ctx.anchor_after,
        ctx.z_before,
        ctx.z_after,
        token_rows,
        draws,
    )?;
    let (alignment, g_a) = alignment_loss_with_grad(bundle, token_rows, ctx.target, ctx.bridge)?;
    let breakdown = combine(ctx, consistency, alignment);
    let grad = ctx.lambda_consistency * &g_c + ctx.lambda_alignment * &g_a;
    Ok((breakdown, grad))
}
