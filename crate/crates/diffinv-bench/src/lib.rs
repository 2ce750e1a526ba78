//! Shared fixtures for the benchmarks: a deterministic mock bundle plus
//! images, anchors, latents, and targets sized like its defaults, so every
//! benchmark measures the algorithm rather than setup noise.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffinv_core::anchoring::caption_prompt;
use diffinv_core::backends::mock::MockBundleBuilder;
use diffinv_core::delta::{Delta, image_delta, slerp, text_delta};
use diffinv_core::{BackendBundle, Latent};

/// The standard deterministic bundle every benchmark shares.
pub fn bundle() -> BackendBundle {
    MockBundleBuilder::new(0).build().expect("mock bundle")
}

/// A seeded 8x8 RGB image.
pub fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// A seeded token matrix with entries in `[-0.5, 0.5)`.
pub fn token_rows(seed: u64, n: usize, width: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, width), |_| rng.random_range(-0.5..0.5))
}

/// Everything one combined-loss evaluation needs, precomputed once.
pub struct LossInputs {
    pub bundle: BackendBundle,
    pub anchor_before: Array2<f64>,
    pub anchor_after: Array2<f64>,
    pub z_before: Latent,
    pub z_after: Latent,
    pub target: Delta,
    pub image_before: RgbImage,
    pub image_after: RgbImage,
}

pub fn loss_inputs(seed: u64) -> LossInputs {
    let bundle = bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_before = random_image(&mut rng);
    let image_after = random_image(&mut rng);
    let anchor_before = caption_prompt(&bundle, &image_before, "bench_a", None).unwrap();
    let anchor_after = caption_prompt(&bundle, &image_after, "bench_ap", None).unwrap();
    let d_img = image_delta(
        &bundle.encode_image(&image_after).unwrap(),
        &bundle.encode_image(&image_before).unwrap(),
    )
    .unwrap();
    let d_txt = text_delta(
        &bundle.encode_text(&anchor_after.text).unwrap(),
        &bundle.encode_text(&anchor_before.text).unwrap(),
    )
    .unwrap();
    LossInputs {
        target: slerp(&d_img, &d_txt, 0.8).unwrap(),
        z_before: bundle.encode_latent(&image_before).unwrap(),
        z_after: bundle.encode_latent(&image_after).unwrap(),
        anchor_before: anchor_before.embeddings,
        anchor_after: anchor_after.embeddings,
        image_before,
        image_after,
        bundle,
    }
}
