//! Deterministic mock backend: small seeded affine maps standing in for the
//! encoders, captioner, latent codec, and denoiser.
//!
//! Everything is linear (plus fixed biases), dimensions are tiny, and all
//! weights derive from one seed, so tests can compute expected values in
//! closed form and whole runs are bit-reproducible on CPU.

use std::sync::Arc;

use image::{Rgb, RgbImage, imageops};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::backends::latent::Latent;
use crate::backends::schedule::NoiseSchedule;
use crate::backends::vocab::VocabTable;
use crate::backends::{
    BackendBundle, Captioner, Denoiser, ImageEncoder, LatentCodec, TextEncoder,
};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

/// Mock component sizes. The defaults keep every matrix small enough for
/// exhaustive oracles while exercising all dimension checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockDims {
    /// Joint embedding dimension shared by image and text encoders.
    pub joint_dim: usize,
    /// Width of one token embedding row.
    pub token_dim: usize,
    /// Latents are `latent_side x latent_side`.
    pub latent_side: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Schedule length.
    pub t_max: usize,
    /// Text encoder sequence capacity.
    pub max_seq_len: usize,
    /// Images are preprocessed to `image_side x image_side` RGB.
    pub image_side: usize,
}

impl Default for MockDims {
    fn default() -> Self {
        MockDims {
            joint_dim: 16,
            token_dim: 8,
            latent_side: 4,
            vocab_size: 32,
            t_max: 100,
            max_seq_len: 16,
            image_side: 8,
        }
    }
}

const WORDS: [&str; 32] = [
    "apple", "bridge", "candle", "door", "ember", "forest", "garden", "harbor", "island",
    "jacket", "kettle", "lantern", "meadow", "night", "ocean", "pebble", "quiet", "river",
    "stone", "temple", "umber", "valley", "window", "yellow", "zephyr", "cloud", "dusk",
    "frost", "glass", "honey", "iris", "moss",
];

fn word(i: usize) -> String {
    let base = WORDS[i % WORDS.len()];
    if i < WORDS.len() { base.to_string() } else { format!("{base}{}", i / WORDS.len()) }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

/// Orthonormalize the rows of a square matrix (modified Gram-Schmidt with
/// one re-orthogonalization pass). Degenerate rows — which a seeded Gaussian
/// draw essentially never produces — fall back to canonical basis vectors so
/// the result is always orthogonal.
fn orthonormal_rows(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let prev = m.row(j).to_owned();
                let mut row = m.row_mut(i);
                row.zip_mut_with(&prev, |a, b| *a -= proj * b);
            }
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm < 1e-10 {
            let mut row = m.row_mut(i);
            row.fill(0.0);
            row[i % n] = 1.0;
        } else {
            let mut row = m.row_mut(i);
            row.mapv_inplace(|v| v / norm);
        }
    }
    m
}

/// Nearest-neighbour resize to the canonical mock resolution; images already
/// at that size pass through untouched.
fn canonical_rgb(image: &RgbImage, side: usize) -> RgbImage {
    if image.width() as usize == side && image.height() as usize == side {
        image.clone()
    } else {
        imageops::resize(image, side as u32, side as u32, imageops::FilterType::Nearest)
    }
}

/// Affine image encoder: `W * pixels + b` over row-major `(y, x, channel)`
/// pixels scaled to `[0, 1]`.
pub struct MockImageEncoder {
    weight: Array2<f64>,
    bias: Array1<f64>,
    side: usize,
}

impl MockImageEncoder {
    pub fn from_seed(dims: MockDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = 3 * dims.image_side * dims.image_side;
        MockImageEncoder {
            weight: gaussian_matrix(&mut rng, dims.joint_dim, inputs, 1.0 / (inputs as f64).sqrt()),
            bias: gaussian_vector(&mut rng, dims.joint_dim, 0.3),
            side: dims.image_side,
        }
    }

    pub fn with_parts(weight: Array2<f64>, bias: Array1<f64>, side: usize) -> Self {
        assert_eq!(weight.ncols(), 3 * side * side);
        assert_eq!(weight.nrows(), bias.len());
        MockImageEncoder { weight, bias, side }
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Flattened `[0, 1]` pixel vector in `(y, x, channel)` order; the weight
    /// column for pixel `(x, y)` channel `c` is `(y * side + x) * 3 + c`.
    pub fn preprocess(&self, image: &RgbImage) -> Array1<f64> {
        let img = canonical_rgb(image, self.side);
        let mut out = Array1::zeros(3 * self.side * self.side);
        for y in 0..self.side {
            for x in 0..self.side {
                let p = img.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    out[(y * self.side + x) * 3 + c] = p[c] as f64 / 255.0;
                }
            }
        }
        out
    }
}

impl ImageEncoder for MockImageEncoder {
    fn joint_dim(&self) -> usize {
        self.bias.len()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let pix = self.preprocess(image);
        Ok(EmbeddingVector::new(self.weight.dot(&pix) + &self.bias))
    }
}

/// Linear-with-positional-terms text encoder:
/// `b + sum_j (W_j * row_j + q_j)` over the input rows.
pub struct MockTextEncoder {
    pos_weight: Vec<Array2<f64>>,
    pos_bias: Vec<Array1<f64>>,
    base_bias: Array1<f64>,
    token_dim: usize,
}

impl MockTextEncoder {
    pub fn from_seed(dims: MockDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dims.token_dim as f64).sqrt();
        let pos_weight = (0..dims.max_seq_len)
            .map(|_| gaussian_matrix(&mut rng, dims.joint_dim, dims.token_dim, scale))
            .collect();
        let pos_bias =
            (0..dims.max_seq_len).map(|_| gaussian_vector(&mut rng, dims.joint_dim, 0.1)).collect();
        MockTextEncoder {
            pos_weight,
            pos_bias,
            base_bias: gaussian_vector(&mut rng, dims.joint_dim, 0.3),
            token_dim: dims.token_dim,
        }
    }

    pub fn positional_weight(&self, j: usize) -> &Array2<f64> {
        &self.pos_weight[j]
    }

    pub fn positional_bias(&self, j: usize) -> &Array1<f64> {
        &self.pos_bias[j]
    }

    pub fn base_bias(&self) -> &Array1<f64> {
        &self.base_bias
    }

    /// What an all-zero matrix of `rows` rows encodes to: the base bias plus
    /// the positional bias terms of the occupied slots.
    pub fn zero_response(&self, rows: usize) -> Array1<f64> {
        let mut out = self.base_bias.clone();
        for j in 0..rows {
            out += &self.pos_bias[j];
        }
        out
    }

    fn check_rows(&self, rows: &Array2<f64>) -> Result<()> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyInput { what: "token rows" });
        }
        if rows.ncols() != self.token_dim {
            return Err(Error::TokenWidthMismatch { expected: self.token_dim, got: rows.ncols() });
        }
        if rows.nrows() > self.pos_weight.len() {
            return Err(Error::SequenceTooLong { len: rows.nrows(), max: self.pos_weight.len() });
        }
        Ok(())
    }
}

impl TextEncoder for MockTextEncoder {
    fn joint_dim(&self) -> usize {
        self.base_bias.len()
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn max_sequence_len(&self) -> usize {
        self.pos_weight.len()
    }

    fn encode_rows(&self, rows: &Array2<f64>) -> Result<EmbeddingVector> {
        self.check_rows(rows)?;
        let mut out = self.base_bias.clone();
        for (j, row) in rows.outer_iter().enumerate() {
            out += &self.pos_weight[j].dot(&row);
            out += &self.pos_bias[j];
        }
        Ok(EmbeddingVector::new(out))
    }

    fn encode_rows_vjp(&self, rows: &Array2<f64>, upstream: &Array1<f64>) -> Result<Array2<f64>> {
        self.check_rows(rows)?;
        if upstream.len() != self.base_bias.len() {
            return Err(Error::DimensionMismatch {
                left: upstream.len(),
                right: self.base_bias.len(),
            });
        }
        let mut grad = Array2::zeros((rows.nrows(), self.token_dim));
        for j in 0..rows.nrows() {
            grad.row_mut(j).assign(&self.pos_weight[j].t().dot(upstream));
        }
        Ok(grad)
    }
}

/// Captioner returning a fixed-length phrase of vocab words selected by an
/// image content hash — deterministic, and distinct images essentially
/// always get distinct captions.
pub struct MockCaptioner {
    vocab: Arc<VocabTable>,
    words: usize,
    side: usize,
}

impl MockCaptioner {
    pub fn new(vocab: Arc<VocabTable>, side: usize) -> Self {
        MockCaptioner { vocab, words: 4, side }
    }
}

impl Captioner for MockCaptioner {
    fn caption(&self, image: &RgbImage) -> Result<String> {
        let img = canonical_rgb(image, self.side);
        let mut hasher = Sha256::new();
        hasher.update(img.width().to_le_bytes());
        hasher.update(img.height().to_le_bytes());
        hasher.update(img.as_raw());
        let digest = hasher.finalize();
        let ids: Vec<usize> = (0..self.words)
            .map(|k| {
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&digest[k * 8..k * 8 + 8]);
                (u64::from_le_bytes(bytes) % self.vocab.size() as u64) as usize
            })
            .collect();
        self.vocab.decode(&ids)
    }
}

/// Invertible latent codec: an orthogonal map over grayscale
/// `latent_side x latent_side` pixels, so decode is exactly the transpose.
pub struct MockLatentCodec {
    map: Array2<f64>,
    side: usize,
}

impl MockLatentCodec {
    pub fn from_seed(dims: MockDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.latent_side * dims.latent_side;
        let map = orthonormal_rows(gaussian_matrix(&mut rng, n, n, 1.0));
        MockLatentCodec { map, side: dims.latent_side }
    }

    pub fn map(&self) -> &Array2<f64> {
        &self.map
    }

    /// Grayscale `[0, 1]` pixels of the canonical `side x side` form, in
    /// row-major order. Gray value is the channel mean.
    pub fn preprocess(&self, image: &RgbImage) -> Array1<f64> {
        let img = canonical_rgb(image, self.side);
        let mut out = Array1::zeros(self.side * self.side);
        for y in 0..self.side {
            for x in 0..self.side {
                let p = img.get_pixel(x as u32, y as u32).0;
                out[y * self.side + x] = (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0);
            }
        }
        out
    }
}

impl LatentCodec for MockLatentCodec {
    fn latent_shape(&self) -> Vec<usize> {
        vec![self.side, self.side]
    }

    fn encode_latent(&self, image: &RgbImage) -> Result<Latent> {
        let pix = self.preprocess(image);
        Latent::from_flat(&[self.side, self.side], self.map.dot(&pix))
    }

    fn decode_latent(&self, latent: &Latent) -> Result<RgbImage> {
        if latent.shape() != [self.side, self.side] {
            return Err(Error::LatentShapeMismatch {
                expected: vec![self.side, self.side],
                got: latent.shape().to_vec(),
            });
        }
        let pix = self.map.t().dot(&latent.to_flat());
        let side = self.side as u32;
        Ok(RgbImage::from_fn(side, side, |x, y| {
            let v = pix[(y as usize) * self.side + x as usize].clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            Rgb([g, g, g])
        }))
    }
}

/// Linear denoiser: `W_z * z + W_t * temb(t) + W_c * mean(cond rows) + b`,
/// reshaped back to the latent shape. Linear in both the latent and the
/// condition, which makes its gradients exact.
pub struct MockDenoiser {
    w_z: Array2<f64>,
    w_t: Array2<f64>,
    w_c: Array2<f64>,
    bias: Array1<f64>,
    t_max: usize,
    side: usize,
    token_dim: usize,
}

impl MockDenoiser {
    pub fn from_seed(dims: MockDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = dims.latent_side * dims.latent_side;
        MockDenoiser {
            w_z: gaussian_matrix(&mut rng, flat, flat, 1.0 / (flat as f64).sqrt()),
            w_t: gaussian_matrix(&mut rng, flat, 4, 0.5),
            w_c: gaussian_matrix(&mut rng, flat, dims.token_dim, 1.0 / (dims.token_dim as f64).sqrt()),
            bias: gaussian_vector(&mut rng, flat, 0.3),
            t_max: dims.t_max,
            side: dims.latent_side,
            token_dim: dims.token_dim,
        }
    }

    pub fn condition_weight(&self) -> &Array2<f64> {
        &self.w_c
    }

    /// Fixed timestep features: `[1, t/T, sin(2 pi t/T), cos(2 pi t/T)]`.
    pub fn temb(&self, t: usize) -> Array1<f64> {
        let x = t as f64 / self.t_max as f64;
        let two_pi_x = 2.0 * std::f64::consts::PI * x;
        Array1::from_vec(vec![1.0, x, two_pi_x.sin(), two_pi_x.cos()])
    }

    /// Mean over condition rows; the empty condition (unconditional branch)
    /// pools to the zero vector.
    pub fn pool_condition(&self, cond: &Array2<f64>) -> Result<Array1<f64>> {
        if cond.ncols() != self.token_dim && !(cond.nrows() == 0 && cond.ncols() == 0) {
            return Err(Error::TokenWidthMismatch { expected: self.token_dim, got: cond.ncols() });
        }
        Ok(cond.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(self.token_dim)))
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.shape() != [self.side, self.side] {
            return Err(Error::LatentShapeMismatch {
                expected: vec![self.side, self.side],
                got: z.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl Denoiser for MockDenoiser {
    fn cond_width(&self) -> usize {
        self.token_dim
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![self.side, self.side]
    }

    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Array2<f64>) -> Result<Latent> {
        self.check_latent(z_t)?;
        let pooled = self.pool_condition(cond)?;
        let flat = self.w_z.dot(&z_t.to_flat())
            + self.w_t.dot(&self.temb(t))
            + self.w_c.dot(&pooled)
            + &self.bias;
        Latent::from_flat(&[self.side, self.side], flat)
    }

    fn predict_noise_vjp(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Array2<f64>,
        upstream: &Latent,
    ) -> Result<Array2<f64>> {
        let _ = t;
        self.check_latent(z_t)?;
        self.check_latent(upstream)?;
        self.pool_condition(cond)?;
        let m = cond.nrows();
        let mut grad = Array2::zeros((m, self.token_dim));
        if m > 0 {
            let per_row = self.w_c.t().dot(&upstream.to_flat()) / m as f64;
            for mut row in grad.outer_iter_mut() {
                row.assign(&per_row);
            }
        }
        Ok(grad)
    }
}

/// Builds mock [`BackendBundle`]s. Components derive their weights from
/// per-component seeds drawn (in fixed order) from the builder seed.
pub struct MockBundleBuilder {
    seed: u64,
    dims: MockDims,
    with_captioner: bool,
    inversion_capable: bool,
}

impl MockBundleBuilder {
    pub fn new(seed: u64) -> Self {
        MockBundleBuilder {
            seed,
            dims: MockDims::default(),
            with_captioner: true,
            inversion_capable: true,
        }
    }

    pub fn dims(mut self, dims: MockDims) -> Self {
        self.dims = dims;
        self
    }

    /// Drop the captioner role (exercises the user-caption error path).
    pub fn without_captioner(mut self) -> Self {
        self.with_captioner = false;
        self
    }

    /// Pretend the backend cannot run latent inversion (exercises the
    /// noise-injection fallback).
    pub fn without_inversion(mut self) -> Self {
        self.inversion_capable = false;
        self
    }

    /// Per-component seeds in construction order:
    /// image encoder, text encoder, vocab, codec, denoiser.
    pub fn component_seeds(seed: u64) -> [u64; 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [rng.random(), rng.random(), rng.random(), rng.random(), rng.random()]
    }

    pub fn build(self) -> Result<BackendBundle> {
        let dims = self.dims;
        let [s_img, s_txt, s_vocab, s_codec, s_den] = Self::component_seeds(self.seed);

        let mut vocab_rng = ChaCha8Rng::seed_from_u64(s_vocab);
        let scale = 1.0 / (dims.token_dim as f64).sqrt();
        let embeddings = gaussian_matrix(&mut vocab_rng, dims.vocab_size, dims.token_dim, scale);
        let tokens = (0..dims.vocab_size).map(word).collect();
        let vocab = Arc::new(VocabTable::new(embeddings, tokens)?);

        let captioner: Option<Arc<dyn Captioner>> = if self.with_captioner {
            Some(Arc::new(MockCaptioner::new(Arc::clone(&vocab), dims.image_side)))
        } else {
            None
        };

        BackendBundle::new(
            "mock",
            Arc::new(MockImageEncoder::from_seed(dims, s_img)),
            Arc::new(MockTextEncoder::from_seed(dims, s_txt)),
            captioner,
            Arc::new(MockLatentCodec::from_seed(dims, s_codec)),
            Arc::new(MockDenoiser::from_seed(dims, s_den)),
            vocab,
            NoiseSchedule::linear_decay(dims.t_max),
            self.inversion_capable,
        )
    }
}
