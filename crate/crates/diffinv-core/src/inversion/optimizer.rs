//! The difference-token optimization loop: anchors, embedding deltas, and
//! gradient descent on the combined objective.

use image::RgbImage;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchoring::{
    AnchorPrompt, AnchorSource, HardPromptSettings, hard_prompt_invert_inner, project_to_vocab,
    prompt_from_text,
};
use crate::backends::BackendBundle;
use crate::backends::vocab::TokenId;
use crate::config::{AnchorConfig, AnchorMode, InversionConfig, TokenMode};
use crate::delta::{Delta, image_delta, slerp, text_delta};
use crate::error::{Error, Result};

use super::DiffTokens;
use super::loss::{LossContext, NoiseDraws, total_loss_with_grad};

/// The before/after pair to invert, plus optional precomputed inputs
/// (injected by callers that cache captions and anchors across runs).
#[derive(Debug, Clone)]
pub struct InversionInputs<'a> {
    pub image_before: &'a RgbImage,
    pub image_after: &'a RgbImage,
    pub id_before: String,
    pub id_after: String,
    /// Caller-supplied captions; when absent the backend captioner is used.
    pub caption_before: Option<String>,
    pub caption_after: Option<String>,
    /// Precomputed anchor prompts (before, after); when absent they are
    /// derived according to the anchor configuration.
    pub anchors: Option<(AnchorPrompt, AnchorPrompt)>,
}

impl<'a> InversionInputs<'a> {
    pub fn new(
        image_before: &'a RgbImage,
        image_after: &'a RgbImage,
        id_before: impl Into<String>,
        id_after: impl Into<String>,
    ) -> Self {
        InversionInputs {
            image_before,
            image_after,
            id_before: id_before.into(),
            id_after: id_after.into(),
            caption_before: None,
            caption_after: None,
            anchors: None,
        }
    }
}

/// One optimization step's recorded losses (measured before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub consistency: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Everything produced by one inversion: the tokens, their nearest
/// vocabulary projection, the optimization trace, and the intermediate
/// quantities worth persisting.
#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub tokens: DiffTokens,
    pub projected_ids: Vec<TokenId>,
    pub projected_tokens: Vec<String>,
    pub projected_embeddings: Array2<f64>,
    pub trace: Vec<TraceRow>,
    pub image_direction: Delta,
    pub text_direction: Delta,
    pub interpolated_direction: Delta,
    pub anchor_before: AnchorPrompt,
    pub anchor_after: AnchorPrompt,
    pub caption_before: String,
    pub caption_after: String,
    /// The loss went non-finite; the tokens are the last finite iterate.
    pub diverged: bool,
    pub divergence_iteration: Option<usize>,
}

/// Deterministically derive a sub-seed for an auxiliary search.
fn derive_seed(base: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(rows: usize, cols: usize) -> Self {
        AdamState { m: Array2::zeros((rows, cols)), v: Array2::zeros((rows, cols)), t: 0 }
    }

    fn step(&mut self, grad: &Array2<f64>, lr: f64) -> Array2<f64> {
        self.t += 1;
        self.m = Self::BETA1 * &self.m + (1.0 - Self::BETA1) * grad;
        self.v = Self::BETA2 * &self.v + (1.0 - Self::BETA2) * &grad.mapv(|g| g * g);
        let m_hat = &self.m / (1.0 - Self::BETA1.powi(self.t));
        let v_hat = &self.v / (1.0 - Self::BETA2.powi(self.t));
        lr * &(&m_hat / &v_hat.mapv(|v| v.sqrt() + Self::EPS))
    }
}

/// Learn difference tokens for one before/after pair.
///
/// The loop draws a fresh timestep/noise pair per iteration, evaluates the
/// combined objective and its gradient at the current tokens (at their
/// nearest-vocabulary projection in hard mode, with the gradient passed
/// straight through), records the trace row, and applies a gradient-descent
/// or adaptive update. A non-finite total stops the run and rolls the
/// tokens back to the last iterate whose loss was finite.
pub fn optimize(
    bundle: &BackendBundle,
    inputs: &InversionInputs<'_>,
    anchor_cfg: &AnchorConfig,
    cfg: &InversionConfig,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    let _guard = bundle.gradient_context()?;
    let vocab = bundle.vocab();

    // Captions feed the text-side delta (and caption-mode anchors).
    let caption_before = match &inputs.caption_before {
        Some(text) => text.clone(),
        None => bundle.caption(inputs.image_before)?,
    };
    let caption_after = match &inputs.caption_after {
        Some(text) => text.clone(),
        None => bundle.caption(inputs.image_after)?,
    };

    let (anchor_before, anchor_after) = match &inputs.anchors {
        Some((before, after)) => (before.clone(), after.clone()),
        None => match anchor_cfg.mode {
            AnchorMode::Pez => {
                let settings = HardPromptSettings::from_config(anchor_cfg);
                let before = hard_prompt_invert_inner(
                    bundle,
                    inputs.image_before,
                    &inputs.id_before,
                    &settings,
                    derive_seed(cfg.seed, 1),
                )?;
                let after = hard_prompt_invert_inner(
                    bundle,
                    inputs.image_after,
                    &inputs.id_after,
                    &settings,
                    derive_seed(cfg.seed, 2),
                )?;
                (before, after)
            }
            AnchorMode::Caption | AnchorMode::User => {
                if anchor_cfg.mode == AnchorMode::User && inputs.caption_before.is_none() {
                    return Err(Error::InvalidConfig(
                        "anchor mode 'user' requires caller-supplied captions".into(),
                    ));
                }
                let source_of = |from_user: bool| {
                    if from_user { AnchorSource::User } else { AnchorSource::Caption }
                };
                (
                    prompt_from_text(
                        vocab,
                        &caption_before,
                        source_of(inputs.caption_before.is_some()),
                        &inputs.id_before,
                    )?,
                    prompt_from_text(
                        vocab,
                        &caption_after,
                        source_of(inputs.caption_after.is_some()),
                        &inputs.id_after,
                    )?,
                )
            }
        },
    };

    let longest_anchor = anchor_before.len().max(anchor_after.len());
    if longest_anchor + cfg.n_tokens > bundle.max_sequence_len() {
        return Err(Error::SequenceTooLong {
            len: longest_anchor + cfg.n_tokens,
            max: bundle.max_sequence_len(),
        });
    }

    // Embedding-space direction of the edit, from both modalities.
    let mut image_direction = image_delta(
        &bundle.encode_image(inputs.image_after)?,
        &bundle.encode_image(inputs.image_before)?,
    )?;
    let mut text_direction = text_delta(
        &bundle.encode_text(&caption_after)?,
        &bundle.encode_text(&caption_before)?,
    )?;
    if cfg.normalize_deltas {
        image_direction = image_direction.normalized()?;
        text_direction = text_direction.normalized()?;
    }
    let interpolated_direction = slerp(&image_direction, &text_direction, cfg.alpha)?;

    let z_before = bundle.encode_latent(inputs.image_before)?;
    let z_after = bundle.encode_latent(inputs.image_after)?;

    let mut tokens = DiffTokens::init(cfg.n_tokens, bundle.token_dim())?;
    tokens.mode = cfg.mode;
    let lr = cfg.effective_learning_rate(bundle.name());
    let draw_range = cfg.effective_timestep_range(bundle.t_max())?;
    let latent_shape = bundle.latent_shape();
    let ctx = LossContext {
        anchor_before: &anchor_before.embeddings,
        anchor_after: &anchor_after.embeddings,
        z_before: &z_before,
        z_after: &z_after,
        target: &interpolated_direction,
        lambda_consistency: cfg.lambda_tc,
        lambda_alignment: cfg.lambda_clip,
        bridge: cfg.clip_bridge,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = cfg.adaptive.then(|| AdamState::new(cfg.n_tokens, bundle.token_dim()));
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut previous: Option<Array2<f64>> = None;
    let mut diverged = false;
    let mut divergence_iteration = None;

    for iteration in 0..cfg.iterations {
        let draws = NoiseDraws::sample(&mut rng, draw_range, &latent_shape);
        let eval_rows = match cfg.mode {
            TokenMode::Soft => tokens.embeddings.clone(),
            TokenMode::Hard => project_to_vocab(&tokens.embeddings, vocab)?.1,
        };
        let (breakdown, grad) = total_loss_with_grad(bundle, &ctx, &eval_rows, &draws)?;
        trace.push(TraceRow {
            iteration,
            consistency: breakdown.consistency,
            alignment: breakdown.alignment,
            total: breakdown.total,
        });
        if !breakdown.total.is_finite() {
            diverged = true;
            divergence_iteration = Some(iteration);
            if let Some(prev) = previous.take() {
                tokens.embeddings = prev;
            }
            break;
        }
        previous = Some(tokens.embeddings.clone());
        let step = match adam.as_mut() {
            Some(state) => state.step(&grad, lr),
            None => lr * &grad,
        };
        tokens.embeddings = &tokens.embeddings - &step;
        tokens.step_count += 1;
    }

    let (projected_ids, projected_embeddings) = project_to_vocab(&tokens.embeddings, vocab)?;
    let projected_tokens = projected_ids
        .iter()
        .map(|&id| vocab.token(id).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    if cfg.mode == TokenMode::Hard {
        // Hard tokens are the discrete rows themselves.
        tokens.embeddings = projected_embeddings.clone();
    }

    Ok(InversionOutcome {
        tokens,
        projected_ids,
        projected_tokens,
        projected_embeddings,
        trace,
        image_direction,
        text_direction,
        interpolated_direction,
        anchor_before,
        anchor_after,
        caption_before,
        caption_after,
        diverged,
        divergence_iteration,
    })
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use rand::Rng;

    use crate::backends::mock::{MockBundleBuilder, MockDims};
    use crate::config::ClipBridge;
    use crate::inversion::loss::alignment_loss;

    use super::*;

    fn pair(seed: u64) -> (RgbImage, RgbImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let b = RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        (a, b)
    }

    fn quick_cfg() -> InversionConfig {
        InversionConfig { n_tokens: 3, iterations: 40, ..Default::default() }
    }

    #[test]
    fn loss_improves_from_the_zero_start() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(5);
        let inputs = InversionInputs::new(&a, &ap, "t0_a", "t0_ap");
        let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &quick_cfg()).unwrap();
        assert_eq!(out.trace.len(), 40);
        assert_eq!(out.tokens.step_count, 40);
        assert!(!out.diverged);
        let first = out.trace.first().unwrap().total;
        let last = out.trace.last().unwrap().total;
        assert!(last < first, "loss did not improve: first {first}, last {last}");
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(6);
        let inputs = InversionInputs::new(&a, &ap, "t1_a", "t1_ap");
        let cfg = quick_cfg();
        let out1 = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
        let out2 = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
        assert_eq!(out1.tokens.embeddings, out2.tokens.embeddings);
        for (r1, r2) in out1.trace.iter().zip(&out2.trace) {
            assert_eq!(r1.total.to_bits(), r2.total.to_bits());
            assert_eq!(r1.consistency.to_bits(), r2.consistency.to_bits());
            assert_eq!(r1.alignment.to_bits(), r2.alignment.to_bits());
        }
    }

    #[test]
    fn injected_anchors_and_captions_skip_the_captioner() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(7);
        let first = {
            let inputs = InversionInputs::new(&a, &ap, "t2_a", "t2_ap");
            optimize(&bundle, &inputs, &AnchorConfig::default(), &quick_cfg()).unwrap()
        };
        let calls_before = bundle.call_counts().caption;
        let mut inputs = InversionInputs::new(&a, &ap, "t2_a", "t2_ap");
        inputs.caption_before = Some(first.caption_before.clone());
        inputs.caption_after = Some(first.caption_after.clone());
        inputs.anchors = Some((first.anchor_before.clone(), first.anchor_after.clone()));
        let second = optimize(&bundle, &inputs, &AnchorConfig::default(), &quick_cfg()).unwrap();
        assert_eq!(bundle.call_counts().caption, calls_before);
        assert_eq!(first.tokens.embeddings, second.tokens.embeddings);
    }

    #[test]
    fn hard_mode_lands_on_exact_vocabulary_rows() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(8);
        let inputs = InversionInputs::new(&a, &ap, "t3_a", "t3_ap");
        let cfg = InversionConfig { mode: TokenMode::Hard, ..quick_cfg() };
        let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
        assert_eq!(out.tokens.embeddings, out.projected_embeddings);
        for (row, &id) in out.tokens.embeddings.outer_iter().zip(&out.projected_ids) {
            assert_eq!(row.to_owned(), bundle.vocab().embeddings().row(id).to_owned());
        }
    }

    #[test]
    fn adaptive_updates_also_improve_the_loss() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(9);
        let inputs = InversionInputs::new(&a, &ap, "t4_a", "t4_ap");
        let cfg = InversionConfig { adaptive: true, ..quick_cfg() };
        let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
        assert!(!out.diverged);
        assert!(out.trace.last().unwrap().total < out.trace.first().unwrap().total);
    }

    #[test]
    fn pez_anchors_feed_the_same_loop() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(10);
        let inputs = InversionInputs::new(&a, &ap, "t5_a", "t5_ap");
        let anchor_cfg = AnchorConfig {
            mode: AnchorMode::Pez,
            length: 4,
            iters: 30,
            ..Default::default()
        };
        let cfg = InversionConfig { iterations: 10, ..quick_cfg() };
        let out = optimize(&bundle, &inputs, &anchor_cfg, &cfg).unwrap();
        assert_eq!(out.anchor_before.source, AnchorSource::Pez);
        assert_eq!(out.anchor_after.source, AnchorSource::Pez);
        assert_eq!(out.anchor_before.len(), 4);
        assert_eq!(out.trace.len(), 10);
    }

    #[test]
    fn user_anchor_mode_requires_captions() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(11);
        let inputs = InversionInputs::new(&a, &ap, "t6_a", "t6_ap");
        let anchor_cfg = AnchorConfig { mode: AnchorMode::User, ..Default::default() };
        let err = optimize(&bundle, &inputs, &anchor_cfg, &quick_cfg()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));

        let mut with_captions = InversionInputs::new(&a, &ap, "t6_a", "t6_ap");
        with_captions.caption_before = Some("stone bridge harbor".into());
        with_captions.caption_after = Some("glass bridge harbor".into());
        let cfg = InversionConfig { iterations: 5, ..quick_cfg() };
        let out = optimize(&bundle, &with_captions, &anchor_cfg, &cfg).unwrap();
        assert_eq!(out.anchor_before.source, AnchorSource::User);
        assert_eq!(out.caption_before, "stone bridge harbor");
    }

    #[test]
    fn alignment_only_run_matches_grid_search() {
        // Drop the consistency weight so the objective reduces to the cosine
        // alignment term, then compare against brute force over a dense grid
        // of single two-wide tokens.
        let dims = MockDims { token_dim: 2, ..Default::default() };
        let bundle = MockBundleBuilder::new(0).dims(dims).build().unwrap();
        let (a, ap) = pair(12);
        let inputs = InversionInputs::new(&a, &ap, "t7_a", "t7_ap");
        let cfg = InversionConfig {
            n_tokens: 1,
            lambda_tc: 0.0,
            iterations: 400,
            ..Default::default()
        };
        let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
        let final_alignment = alignment_loss(
            &bundle,
            &out.tokens.embeddings,
            &out.interpolated_direction,
            ClipBridge::Encode,
        )
        .unwrap();

        let mut grid_best = f64::INFINITY;
        let r = 2.0;
        let steps = 80;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = -r + 2.0 * r * (i as f64) / (steps as f64);
                let y = -r + 2.0 * r * (j as f64) / (steps as f64);
                let rows = Array2::from_shape_vec((1, 2), vec![x, y]).unwrap();
                let v = alignment_loss(
                    &bundle,
                    &rows,
                    &out.interpolated_direction,
                    ClipBridge::Encode,
                )
                .unwrap();
                grid_best = grid_best.min(v);
            }
        }
        assert!(
            final_alignment <= grid_best + 1e-3,
            "optimizer reached {final_alignment}, grid search found {grid_best}"
        );
    }

    #[test]
    fn too_many_tokens_for_the_sequence_budget_error_out() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let (a, ap) = pair(13);
        let inputs = InversionInputs::new(&a, &ap, "t8_a", "t8_ap");
        // Caption anchors are 4 tokens; 13 difference tokens overflow 16.
        let cfg = InversionConfig { n_tokens: 13, ..quick_cfg() };
        let err = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }
}
