//! Applying learned difference tokens to a query image: assemble the full
//! prompt, partially invert the query latent, and re-denoise under the
//! token-augmented prompt.

use image::RgbImage;
use ndarray::{Array2, Axis, concatenate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::sampler::{ddim_denoise, ddim_invert, timestep_descent};
use crate::backends::{BackendBundle, Latent};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::inversion::DiffTokens;

/// What a span of rows in an assembled prompt represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPart {
    /// The query image's own prompt.
    Query,
    /// The appended difference tokens.
    DifferenceTokens,
}

/// A prompt matrix with the tokens appended after the query rows, plus a map
/// of which rows belong to which part.
#[derive(Debug, Clone)]
pub struct FullPrompt {
    pub embeddings: Array2<f64>,
    pub parts: Vec<(PromptPart, std::ops::Range<usize>)>,
    /// Set when the query rows had to be cut to fit the sequence budget.
    pub truncated: bool,
}

impl FullPrompt {
    /// The rows belonging to one part (empty matrix if the part is absent).
    pub fn part_rows(&self, part: PromptPart) -> Array2<f64> {
        for (p, range) in &self.parts {
            if *p == part {
                return self.embeddings.slice(ndarray::s![range.clone(), ..]).to_owned();
            }
        }
        Array2::zeros((0, self.embeddings.ncols()))
    }
}

/// Append token rows to the query prompt, truncating only the query side
/// when the combination exceeds the sequence budget. The tokens themselves
/// are never cut; a token matrix alone exceeding the budget is an error.
pub fn assemble_full_prompt(
    query_rows: &Array2<f64>,
    token_rows: &Array2<f64>,
    max_sequence_len: usize,
) -> Result<FullPrompt> {
    let n = token_rows.nrows();
    if n > max_sequence_len {
        return Err(Error::SequenceTooLong { len: n, max: max_sequence_len });
    }
    if query_rows.nrows() == 0 && n == 0 {
        return Err(Error::EmptyInput { what: "full prompt" });
    }
    if query_rows.nrows() > 0 && n > 0 && query_rows.ncols() != token_rows.ncols() {
        return Err(Error::TokenWidthMismatch {
            expected: query_rows.ncols(),
            got: token_rows.ncols(),
        });
    }
    let keep = query_rows.nrows().min(max_sequence_len - n);
    let truncated = keep < query_rows.nrows();
    let kept_query = query_rows.slice(ndarray::s![..keep, ..]);
    let embeddings = if n == 0 {
        kept_query.to_owned()
    } else if keep == 0 {
        token_rows.clone()
    } else {
        concatenate(Axis(0), &[kept_query, token_rows.view()])
            .map_err(|e| Error::InvalidConfig(format!("prompt stacking failed: {e}")))?
    };
    Ok(FullPrompt {
        embeddings,
        parts: vec![
            (PromptPart::Query, 0..keep),
            (PromptPart::DifferenceTokens, keep..keep + n),
        ],
        truncated,
    })
}

/// The result of applying difference tokens to a query image.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub image: RgbImage,
    pub latent: Latent,
    /// The backend cannot run deterministic latent inversion, so the start
    /// state came from directly noising the query latent instead.
    pub fallback_img2img: bool,
    pub full_prompt: FullPrompt,
}

/// Edit a query image with learned difference tokens.
///
/// The query latent is carried to a noise level set by `strength` (the
/// rounded share of the step budget), then re-denoised under the query
/// prompt with the tokens appended. Strength zero skips the noise round
/// trip entirely and returns the codec reconstruction of the query.
pub fn generate_bprime(
    bundle: &BackendBundle,
    query_image: &RgbImage,
    query_rows: &Array2<f64>,
    tokens: &DiffTokens,
    cfg: &PipelineConfig,
) -> Result<GenerationOutcome> {
    cfg.validate()?;
    let full_prompt =
        assemble_full_prompt(query_rows, &tokens.embeddings, bundle.max_sequence_len())?;
    let z_query = bundle.encode_latent(query_image)?;

    let k = (cfg.strength * cfg.steps as f64).round() as usize;
    let k = k.min(cfg.steps);
    if k == 0 {
        let image = bundle.decode_latent(&z_query)?;
        return Ok(GenerationOutcome {
            image,
            latent: z_query,
            fallback_img2img: false,
            full_prompt,
        });
    }

    // The k lowest timesteps of the full schedule: a partial trajectory
    // whose top level scales with the strength.
    let descending = timestep_descent(bundle.t_max(), cfg.steps);
    let used = &descending[cfg.steps - k..];
    let t_start = used[0];

    let (z_noised, fallback_img2img) = if bundle.supports_inversion() {
        let ascending: Vec<usize> = used.iter().rev().copied().collect();
        let query_part = full_prompt.part_rows(PromptPart::Query);
        (ddim_invert(bundle, &z_query, &query_part, &ascending, 1.0)?, false)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let eps = Latent::standard_normal(&bundle.latent_shape(), &mut rng);
        (bundle.add_noise(&z_query, t_start, &eps)?, true)
    };

    let latent = ddim_denoise(bundle, &z_noised, &full_prompt.embeddings, used, cfg.guidance)?;
    let image = bundle.decode_latent(&latent)?;
    Ok(GenerationOutcome { image, latent, fallback_img2img, full_prompt })
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use rand::Rng;

    use crate::backends::mock::MockBundleBuilder;
    use crate::config::TokenMode;

    use super::*;

    fn query(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn trained_tokens(n: usize) -> DiffTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        DiffTokens::from_matrix(
            Array2::from_shape_fn((n, 8), |_| rng.random_range(-0.4..0.4)),
            TokenMode::Soft,
        )
    }

    #[test]
    fn prompt_assembly_places_tokens_after_query_rows() {
        let q = Array2::from_elem((3, 8), 1.0);
        let t = Array2::from_elem((2, 8), 2.0);
        let full = assemble_full_prompt(&q, &t, 16).unwrap();
        assert!(!full.truncated);
        assert_eq!(full.embeddings.nrows(), 5);
        assert_eq!(full.parts, vec![
            (PromptPart::Query, 0..3),
            (PromptPart::DifferenceTokens, 3..5),
        ]);
        assert_eq!(full.part_rows(PromptPart::Query), q);
        assert_eq!(full.part_rows(PromptPart::DifferenceTokens), t);
    }

    #[test]
    fn only_the_query_side_is_truncated() {
        let q = Array2::from_shape_fn((15, 8), |(i, _)| i as f64);
        let t = Array2::from_elem((5, 8), -1.0);
        let full = assemble_full_prompt(&q, &t, 16).unwrap();
        assert!(full.truncated);
        assert_eq!(full.embeddings.nrows(), 16);
        assert_eq!(full.part_rows(PromptPart::Query).nrows(), 11);
        assert_eq!(full.part_rows(PromptPart::DifferenceTokens), t);
        // The kept query rows are the leading ones.
        assert_eq!(full.embeddings[[0, 0]], 0.0);
        assert_eq!(full.embeddings[[10, 0]], 10.0);
    }

    #[test]
    fn tokens_alone_overflowing_the_budget_is_an_error() {
        let q = Array2::zeros((2, 8));
        let t = Array2::zeros((17, 8));
        assert!(matches!(
            assemble_full_prompt(&q, &t, 16),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn zero_token_rows_leave_the_query_prompt_untouched() {
        let q = Array2::from_elem((4, 8), 3.0);
        let t = Array2::zeros((0, 8));
        let full = assemble_full_prompt(&q, &t, 16).unwrap();
        assert_eq!(full.embeddings, q);
        assert_eq!(full.part_rows(PromptPart::DifferenceTokens).nrows(), 0);
    }

    #[test]
    fn zero_strength_returns_the_codec_round_trip() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let b = query(1);
        let rows = bundle.vocab().rows_for(&[3, 4]).unwrap();
        let cfg = PipelineConfig { strength: 0.0, ..Default::default() };
        let out = generate_bprime(&bundle, &b, &rows, &trained_tokens(2), &cfg).unwrap();
        // The mock codec reconstructs its grayscale view of the query
        // exactly, so strength zero is a fixed point of encode/decode.
        let expected = bundle.decode_latent(&bundle.encode_latent(&b).unwrap()).unwrap();
        assert_eq!(out.image, expected);
        assert!(!out.fallback_img2img);
    }

    #[test]
    fn generation_is_deterministic() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let b = query(2);
        let rows = bundle.vocab().rows_for(&[7, 9, 11]).unwrap();
        let cfg = PipelineConfig::default();
        let tokens = trained_tokens(3);
        let out1 = generate_bprime(&bundle, &b, &rows, &tokens, &cfg).unwrap();
        let out2 = generate_bprime(&bundle, &b, &rows, &tokens, &cfg).unwrap();
        assert_eq!(out1.image, out2.image);
        assert_eq!(out1.latent.values, out2.latent.values);
    }

    #[test]
    fn strength_changes_the_result() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let b = query(3);
        let rows = bundle.vocab().rows_for(&[1, 2]).unwrap();
        let tokens = trained_tokens(2);
        let weak = PipelineConfig { strength: 0.2, ..Default::default() };
        let strong = PipelineConfig { strength: 0.9, ..Default::default() };
        let out_weak = generate_bprime(&bundle, &b, &rows, &tokens, &weak).unwrap();
        let out_strong = generate_bprime(&bundle, &b, &rows, &tokens, &strong).unwrap();
        assert_ne!(out_weak.image, out_strong.image);
    }

    #[test]
    fn tokens_change_the_result() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let b = query(4);
        let rows = bundle.vocab().rows_for(&[5, 6]).unwrap();
        let cfg = PipelineConfig::default();
        let with = generate_bprime(&bundle, &b, &rows, &trained_tokens(3), &cfg).unwrap();
        let without = generate_bprime(
            &bundle,
            &b,
            &rows,
            &DiffTokens::from_matrix(Array2::zeros((0, 8)), TokenMode::Soft),
            &cfg,
        )
        .unwrap();
        assert_ne!(with.image, without.image);
    }

    #[test]
    fn backends_without_inversion_fall_back_to_direct_noising() {
        let bundle = MockBundleBuilder::new(0).without_inversion().build().unwrap();
        let b = query(5);
        let rows = bundle.vocab().rows_for(&[8]).unwrap();
        let cfg = PipelineConfig::default();
        let tokens = trained_tokens(2);
        let out1 = generate_bprime(&bundle, &b, &rows, &tokens, &cfg).unwrap();
        let out2 = generate_bprime(&bundle, &b, &rows, &tokens, &cfg).unwrap();
        assert!(out1.fallback_img2img);
        assert_eq!(out1.image, out2.image);
        // A different seed draws different fallback noise.
        let reseeded = PipelineConfig { seed: 99, ..cfg };
        let out3 = generate_bprime(&bundle, &b, &rows, &tokens, &reseeded).unwrap();
        assert_ne!(out1.image, out3.image);
    }

    #[test]
    fn negated_tokens_steer_differently_than_positive_ones() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let b = query(6);
        let rows = bundle.vocab().rows_for(&[14, 15]).unwrap();
        let cfg = PipelineConfig::default();
        let tokens = trained_tokens(2);
        let plus = generate_bprime(&bundle, &b, &rows, &tokens, &cfg).unwrap();
        let minus = generate_bprime(&bundle, &b, &rows, &tokens.negated(), &cfg).unwrap();
        assert_ne!(plus.image, minus.image);
    }
}
