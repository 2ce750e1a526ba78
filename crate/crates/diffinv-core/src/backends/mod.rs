//! Backend adapter contracts and the bundle gluing one backend's encoders,
//! captioner, latent codec, denoiser, vocabulary, and noise schedule
//! together.
//!
//! Algorithms in this crate only ever talk to [`BackendBundle`], so swapping
//! the deterministic mock for a real diffusion stack is a matter of
//! registering different adapters — no algorithm code changes.

pub mod latent;
pub mod mock;
pub mod registry;
pub mod sampler;
pub mod schedule;
pub mod vocab;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
pub use latent::Latent;
pub use schedule::NoiseSchedule;
pub use vocab::{TokenId, UNKNOWN_TOKEN_ID, VocabTable};

/// Maps images into the joint embedding space.
pub trait ImageEncoder: Send + Sync {
    fn joint_dim(&self) -> usize;
    fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector>;
}

/// Maps token-embedding matrices (rows = tokens) into the joint embedding
/// space. The embedding-passthrough path is differentiable: adapters expose
/// the vector-Jacobian product so optimizers can chain gradients through it.
pub trait TextEncoder: Send + Sync {
    fn joint_dim(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn max_sequence_len(&self) -> usize;
    /// Encode a matrix of token embeddings.
    fn encode_rows(&self, rows: &Array2<f64>) -> Result<EmbeddingVector>;
    /// Vector-Jacobian product of [`TextEncoder::encode_rows`]: given
    /// `dL/d(output)`, return `dL/d(rows)` with the same shape as `rows`.
    fn encode_rows_vjp(&self, rows: &Array2<f64>, upstream: &Array1<f64>) -> Result<Array2<f64>>;
}

/// Produces a short text description of an image.
pub trait Captioner: Send + Sync {
    fn caption(&self, image: &RgbImage) -> Result<String>;
}

/// Moves images in and out of latent space.
pub trait LatentCodec: Send + Sync {
    fn latent_shape(&self) -> Vec<usize>;
    fn encode_latent(&self, image: &RgbImage) -> Result<Latent>;
    fn decode_latent(&self, latent: &Latent) -> Result<RgbImage>;
}

/// Predicts the noise content of a noised latent, conditioned on a
/// token-embedding matrix. Differentiable with respect to the condition.
pub trait Denoiser: Send + Sync {
    fn cond_width(&self) -> usize;
    fn latent_shape(&self) -> Vec<usize>;
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Array2<f64>) -> Result<Latent>;
    /// Vector-Jacobian product of [`Denoiser::predict_noise`] with respect to
    /// `cond`: given `dL/d(output)`, return `dL/d(cond)`.
    fn predict_noise_vjp(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Array2<f64>,
        upstream: &Latent,
    ) -> Result<Array2<f64>>;
}

/// Per-operation backend call counts, snapshotted into run summaries so
/// resumed runs can prove they touched the backend zero times.
#[derive(Debug, Default)]
pub struct CallCounters {
    encode_image: AtomicU64,
    encode_text: AtomicU64,
    caption: AtomicU64,
    encode_latent: AtomicU64,
    decode_latent: AtomicU64,
    add_noise: AtomicU64,
    predict_noise: AtomicU64,
    sample: AtomicU64,
}

/// Plain snapshot of [`CallCounters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub encode_image: u64,
    pub encode_text: u64,
    pub caption: u64,
    pub encode_latent: u64,
    pub decode_latent: u64,
    pub add_noise: u64,
    pub predict_noise: u64,
    pub sample: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.encode_image
            + self.encode_text
            + self.caption
            + self.encode_latent
            + self.decode_latent
            + self.add_noise
            + self.predict_noise
            + self.sample
    }
}

impl CallCounters {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            encode_image: self.encode_image.load(Ordering::Relaxed),
            encode_text: self.encode_text.load(Ordering::Relaxed),
            caption: self.caption.load(Ordering::Relaxed),
            encode_latent: self.encode_latent.load(Ordering::Relaxed),
            decode_latent: self.decode_latent.load(Ordering::Relaxed),
            add_noise: self.add_noise.load(Ordering::Relaxed),
            predict_noise: self.predict_noise.load(Ordering::Relaxed),
            sample: self.sample.load(Ordering::Relaxed),
        }
    }
}

/// Holds the gradient context of a bundle; at most one exists at a time.
/// Dropping it releases the context.
pub struct GradientGuard {
    flag: Arc<AtomicBool>,
}

impl Drop for GradientGuard {
    fn drop(&mut self) {
        self.flag.store(false, Ordering::Release);
    }
}

/// Starting point for [`BackendBundle::sample`].
pub enum SampleInit {
    /// Draw pure noise from the given seed.
    Noise { seed: u64 },
    /// Continue from an existing (already noised) latent.
    Latent(Latent),
}

/// One backend's adapters plus shared tables, wired together and
/// dimension-checked.
///
/// Every public method increments a call counter; the optional text tap
/// records every string that enters or leaves the backend, which lets tests
/// prove that forbidden text (e.g. dataset edit instructions) never reaches
/// the model.
pub struct BackendBundle {
    name: String,
    image_encoder: Arc<dyn ImageEncoder>,
    text_encoder: Arc<dyn TextEncoder>,
    captioner: Option<Arc<dyn Captioner>>,
    latent_codec: Arc<dyn LatentCodec>,
    denoiser: Arc<dyn Denoiser>,
    vocab: Arc<VocabTable>,
    schedule: NoiseSchedule,
    inversion_capable: bool,
    calls: CallCounters,
    text_tap: Mutex<Option<Vec<String>>>,
    gradient_busy: Arc<AtomicBool>,
}

impl BackendBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        image_encoder: Arc<dyn ImageEncoder>,
        text_encoder: Arc<dyn TextEncoder>,
        captioner: Option<Arc<dyn Captioner>>,
        latent_codec: Arc<dyn LatentCodec>,
        denoiser: Arc<dyn Denoiser>,
        vocab: Arc<VocabTable>,
        schedule: NoiseSchedule,
        inversion_capable: bool,
    ) -> Result<Self> {
        if image_encoder.joint_dim() != text_encoder.joint_dim() {
            return Err(Error::InvalidConfig(format!(
                "image encoder joint dim {} != text encoder joint dim {}",
                image_encoder.joint_dim(),
                text_encoder.joint_dim()
            )));
        }
        if text_encoder.token_dim() != vocab.token_dim() {
            return Err(Error::InvalidConfig(format!(
                "text encoder token dim {} != vocab token dim {}",
                text_encoder.token_dim(),
                vocab.token_dim()
            )));
        }
        if denoiser.cond_width() != vocab.token_dim() {
            return Err(Error::InvalidConfig(format!(
                "denoiser condition width {} != vocab token dim {}",
                denoiser.cond_width(),
                vocab.token_dim()
            )));
        }
        if denoiser.latent_shape() != latent_codec.latent_shape() {
            return Err(Error::InvalidConfig(format!(
                "denoiser latent shape {:?} != codec latent shape {:?}",
                denoiser.latent_shape(),
                latent_codec.latent_shape()
            )));
        }
        Ok(BackendBundle {
            name: name.into(),
            image_encoder,
            text_encoder,
            captioner,
            latent_codec,
            denoiser,
            vocab,
            schedule,
            inversion_capable,
            calls: CallCounters::default(),
            text_tap: Mutex::new(None),
            gradient_busy: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_dim(&self) -> usize {
        self.image_encoder.joint_dim()
    }

    pub fn token_dim(&self) -> usize {
        self.text_encoder.token_dim()
    }

    pub fn max_sequence_len(&self) -> usize {
        self.text_encoder.max_sequence_len()
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        self.latent_codec.latent_shape()
    }

    pub fn t_max(&self) -> usize {
        self.schedule.len()
    }

    pub fn vocab(&self) -> &VocabTable {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn supports_inversion(&self) -> bool {
        self.inversion_capable
    }

    pub fn has_captioner(&self) -> bool {
        self.captioner.is_some()
    }

    /// The image encoder as a standalone handle (evaluation reuses it).
    pub fn image_encoder(&self) -> Arc<dyn ImageEncoder> {
        Arc::clone(&self.image_encoder)
    }

    pub fn call_counts(&self) -> CallCounts {
        self.calls.snapshot()
    }

    /// Start recording every text string crossing the backend boundary.
    pub fn enable_text_tap(&self) {
        let mut tap = self.text_tap.lock().expect("text tap lock");
        if tap.is_none() {
            *tap = Some(Vec::new());
        }
    }

    /// Drain the recorded strings (empty if the tap was never enabled).
    pub fn take_text_tap(&self) -> Vec<String> {
        let mut tap = self.text_tap.lock().expect("text tap lock");
        tap.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn tap_text(&self, text: &str) {
        let mut tap = self.text_tap.lock().expect("text tap lock");
        if let Some(entries) = tap.as_mut() {
            entries.push(text.to_string());
        }
    }

    /// Claim the bundle's single gradient context. The optimizers call this
    /// before any gradient-bearing work; a second concurrent claim errors.
    pub fn gradient_context(&self) -> Result<GradientGuard> {
        if self.gradient_busy.swap(true, Ordering::AcqRel) {
            return Err(Error::GradientContextBusy);
        }
        Ok(GradientGuard { flag: Arc::clone(&self.gradient_busy) })
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        CallCounters::bump(&self.calls.encode_image);
        self.image_encoder.encode_image(image)
    }

    /// Tokenize raw text against the vocab and encode it.
    pub fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.tap_text(text);
        let ids = self.vocab.tokenize(text);
        if ids.is_empty() {
            return Err(Error::EmptyInput { what: "text to encode" });
        }
        self.encode_token_ids(&ids)
    }

    /// Encode a token-id sequence (equivalent to encoding its vocab rows).
    pub fn encode_token_ids(&self, ids: &[TokenId]) -> Result<EmbeddingVector> {
        if let Ok(decoded) = self.vocab.decode(ids) {
            self.tap_text(&decoded);
        }
        let rows = self.vocab.rows_for(ids)?;
        CallCounters::bump(&self.calls.encode_text);
        self.text_encoder.encode_rows(&rows)
    }

    /// Encode a token-embedding matrix directly (the differentiable path).
    pub fn encode_rows(&self, rows: &Array2<f64>) -> Result<EmbeddingVector> {
        CallCounters::bump(&self.calls.encode_text);
        self.text_encoder.encode_rows(rows)
    }

    /// Gradient of [`BackendBundle::encode_rows`] (vector-Jacobian product).
    pub fn encode_rows_vjp(
        &self,
        rows: &Array2<f64>,
        upstream: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        self.text_encoder.encode_rows_vjp(rows, upstream)
    }

    pub fn caption(&self, image: &RgbImage) -> Result<String> {
        let captioner = self
            .captioner
            .as_ref()
            .ok_or_else(|| Error::CaptionerUnavailable { backend: self.name.clone() })?;
        CallCounters::bump(&self.calls.caption);
        let text = captioner.caption(image)?;
        self.tap_text(&text);
        Ok(text)
    }

    pub fn encode_latent(&self, image: &RgbImage) -> Result<Latent> {
        CallCounters::bump(&self.calls.encode_latent);
        self.latent_codec.encode_latent(image)
    }

    pub fn decode_latent(&self, latent: &Latent) -> Result<RgbImage> {
        CallCounters::bump(&self.calls.decode_latent);
        self.latent_codec.decode_latent(latent)
    }

    pub fn add_noise(&self, z0: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
        CallCounters::bump(&self.calls.add_noise);
        self.schedule.add_noise(z0, t, eps)
    }

    pub fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Array2<f64>) -> Result<Latent> {
        if t >= self.schedule.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.schedule.len() });
        }
        CallCounters::bump(&self.calls.predict_noise);
        self.denoiser.predict_noise(z_t, t, cond)
    }

    /// Gradient of [`BackendBundle::predict_noise`] with respect to the
    /// condition matrix (vector-Jacobian product).
    pub fn predict_noise_vjp(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Array2<f64>,
        upstream: &Latent,
    ) -> Result<Array2<f64>> {
        if t >= self.schedule.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.schedule.len() });
        }
        self.denoiser.predict_noise_vjp(z_t, t, cond, upstream)
    }

    /// Reverse diffusion under a fixed condition: deterministic sampling
    /// from noise (or from a provided latent) over `steps` evenly spaced
    /// timesteps with classifier-free guidance.
    pub fn sample(
        &self,
        cond: &Array2<f64>,
        init: SampleInit,
        steps: usize,
        guidance: f64,
    ) -> Result<Latent> {
        CallCounters::bump(&self.calls.sample);
        let ts = sampler::timestep_descent(self.t_max(), steps);
        let z_start = match init {
            SampleInit::Noise { seed } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                Latent::standard_normal(&self.latent_shape(), &mut rng)
            }
            SampleInit::Latent(z) => z,
        };
        sampler::ddim_denoise(self, &z_start, cond, &ts, guidance)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBundleBuilder, MockDims};
    use super::*;

    #[test]
    fn dimension_mismatch_is_rejected_at_construction() {
        // A vocab whose width disagrees with the text encoder must not wire up.
        let dims = MockDims::default();
        let bundle = MockBundleBuilder::new(0).dims(dims).build().unwrap();
        let bad_vocab = Arc::new(
            VocabTable::new(
                ndarray::Array2::zeros((4, dims.token_dim + 1)).mapv(|_: f64| 0.5),
                vec!["a".into(), "b".into(), "c".into(), "d".into()],
            )
            .unwrap(),
        );
        let result = BackendBundle::new(
            "broken",
            bundle.image_encoder(),
            Arc::clone(&bundle.text_encoder),
            None,
            Arc::clone(&bundle.latent_codec),
            Arc::clone(&bundle.denoiser),
            bad_vocab,
            bundle.schedule().clone(),
            true,
        );
        assert!(matches!(result, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn gradient_context_is_exclusive() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let guard = bundle.gradient_context().unwrap();
        assert!(matches!(bundle.gradient_context(), Err(Error::GradientContextBusy)));
        drop(guard);
        assert!(bundle.gradient_context().is_ok());
    }

    #[test]
    fn call_counters_track_operations() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let img = RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]));
        bundle.encode_image(&img).unwrap();
        bundle.encode_image(&img).unwrap();
        bundle.caption(&img).unwrap();
        let counts = bundle.call_counts();
        assert_eq!(counts.encode_image, 2);
        assert_eq!(counts.caption, 1);
        assert_eq!(counts.predict_noise, 0);
    }

    #[test]
    fn text_tap_records_backend_text() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let img = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        bundle.enable_text_tap();
        let caption = bundle.caption(&img).unwrap();
        bundle.encode_text(&caption).unwrap();
        let tap = bundle.take_text_tap();
        assert!(tap.len() >= 2);
        assert!(tap.iter().any(|t| t == &caption));
    }

    #[test]
    fn captionerless_bundle_says_how_to_proceed() {
        let bundle = MockBundleBuilder::new(0).without_captioner().build().unwrap();
        let img = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        let err = bundle.caption(&img).unwrap_err();
        assert!(matches!(err, Error::CaptionerUnavailable { .. }));
        assert!(err.to_string().contains("user"));
    }
}
