//! Anchor prompts: fixed token-embedding matrices describing one input
//! image, against which difference tokens are optimized and applied.
//!
//! Three sources are supported: hard-prompt inversion (projected gradient
//! ascent over the vocabulary), tokenized captioner output, and
//! user-supplied captions.

use std::io::Write as _;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::vocab::{TokenId, VocabTable};
use crate::backends::BackendBundle;
use crate::embedding::{EmbeddingVector, cosine_similarity_arrays};
use crate::error::{Error, Result};

/// How an anchor prompt was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSource {
    /// Hard-prompt inversion against the image embedding.
    Pez,
    /// Tokenized captioner output.
    Caption,
    /// Tokenized user-supplied caption.
    User,
}

impl AnchorSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnchorSource::Pez => "pez",
            AnchorSource::Caption => "caption",
            AnchorSource::User => "user",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pez" => Ok(AnchorSource::Pez),
            "caption" => Ok(AnchorSource::Caption),
            "user" => Ok(AnchorSource::User),
            other => Err(Error::InvalidConfig(format!("unknown anchor source '{other}'"))),
        }
    }
}

/// A fixed prompt for one image: token embeddings (rows), the token ids they
/// came from when the prompt lives on the vocabulary, and bookkeeping.
#[derive(Debug, Clone)]
pub struct AnchorPrompt {
    /// Present when every row is an exact vocabulary embedding.
    pub token_ids: Option<Vec<TokenId>>,
    /// `rows x token_dim` embedding matrix fed to text encoder and denoiser.
    pub embeddings: Array2<f64>,
    pub source: AnchorSource,
    /// Identifier of the image this prompt describes.
    pub target_image_id: String,
    /// Human-readable form: the caption text or the space-joined tokens.
    pub text: String,
}

impl AnchorPrompt {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    /// Check internal consistency: ids (when present) must re-embed to
    /// exactly the stored rows.
    pub fn validate(&self, vocab: &VocabTable) -> Result<()> {
        if self.embeddings.nrows() == 0 {
            return Err(Error::EmptyInput { what: "anchor prompt" });
        }
        if let Some(ids) = &self.token_ids {
            if ids.len() != self.embeddings.nrows() {
                return Err(Error::InvalidConfig(format!(
                    "anchor has {} ids for {} embedding rows",
                    ids.len(),
                    self.embeddings.nrows()
                )));
            }
            let expected = vocab.rows_for(ids)?;
            if expected != self.embeddings {
                return Err(Error::InvalidConfig(
                    "anchor embeddings do not match vocab rows for its token ids".into(),
                ));
            }
        }
        Ok(())
    }

    /// Two-line sidecar: source on the first line, caption/token text on the
    /// second. Embeddings travel separately in the artifact store.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", self.source.as_str()).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", self.text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Read a sidecar back; the embeddings must be supplied from the
    /// artifact store.
    pub fn read_sidecar(
        path: &Path,
        embeddings: Array2<f64>,
        vocab: &VocabTable,
        target_image_id: impl Into<String>,
    ) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines();
        let source = AnchorSource::parse(lines.next().unwrap_or_default())?;
        let text = lines.next().unwrap_or_default().to_string();
        let prompt = AnchorPrompt {
            token_ids: None,
            embeddings,
            source,
            target_image_id: target_image_id.into(),
            text,
        };
        // Re-attach ids when the text tokenizes back onto the stored rows.
        let ids = vocab.tokenize(&prompt.text);
        if ids.len() == prompt.embeddings.nrows()
            && vocab.rows_for(&ids).map(|r| r == prompt.embeddings).unwrap_or(false)
        {
            return Ok(AnchorPrompt { token_ids: Some(ids), ..prompt });
        }
        Ok(prompt)
    }
}

/// Project every row of a continuous matrix onto its nearest vocabulary
/// token under cosine similarity. Ties (including all-zero rows, which are
/// equally dissimilar to everything) resolve to the lowest token id.
pub fn project_to_vocab(
    rows: &Array2<f64>,
    vocab: &VocabTable,
) -> Result<(Vec<TokenId>, Array2<f64>)> {
    if rows.ncols() != vocab.token_dim() {
        return Err(Error::TokenWidthMismatch { expected: vocab.token_dim(), got: rows.ncols() });
    }
    let mut ids = Vec::with_capacity(rows.nrows());
    for row in rows.outer_iter() {
        ids.push(nearest_token(&row, vocab));
    }
    let projected = vocab.rows_for(&ids)?;
    Ok((ids, projected))
}

fn nearest_token(row: &ArrayView1<'_, f64>, vocab: &VocabTable) -> TokenId {
    let row_owned = row.to_owned();
    let mut best_id = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for id in 0..vocab.size() {
        let emb = vocab.embeddings().row(id).to_owned();
        let sim = cosine_similarity_arrays(&row_owned, &emb);
        // Strict improvement keeps the lowest id on exact ties.
        if sim > best_sim {
            best_sim = sim;
            best_id = id;
        }
    }
    best_id
}

/// Tokenize caption text into an anchor prompt on the vocabulary.
pub fn prompt_from_text(
    vocab: &VocabTable,
    text: &str,
    source: AnchorSource,
    image_id: &str,
) -> Result<AnchorPrompt> {
    let ids = vocab.tokenize(text);
    if ids.is_empty() {
        return Err(Error::EmptyCaption { image_id: image_id.to_string() });
    }
    let embeddings = vocab.rows_for(&ids)?;
    Ok(AnchorPrompt {
        token_ids: Some(ids),
        embeddings,
        source,
        target_image_id: image_id.to_string(),
        text: text.to_string(),
    })
}

/// Build an anchor prompt from a caption: the captioner's output by default,
/// or a caller-supplied caption (which flips the recorded source to `user`).
pub fn caption_prompt(
    bundle: &BackendBundle,
    image: &RgbImage,
    image_id: &str,
    user_caption: Option<&str>,
) -> Result<AnchorPrompt> {
    let (text, source) = match user_caption {
        Some(c) => (c.to_string(), AnchorSource::User),
        None => (bundle.caption(image)?, AnchorSource::Caption),
    };
    prompt_from_text(bundle.vocab(), &text, source, image_id)
}

/// Settings for [`hard_prompt_invert`].
#[derive(Debug, Clone, Copy)]
pub struct HardPromptSettings {
    /// Number of token rows in the searched prompt.
    pub length: usize,
    /// Total gradient-step budget across restarts.
    pub iters: usize,
    /// Ascent step size.
    pub learning_rate: f64,
    /// Steps without a best-seen improvement before restarting from the
    /// next fresh vocabulary initialization.
    pub patience: usize,
}

impl Default for HardPromptSettings {
    fn default() -> Self {
        HardPromptSettings { length: 8, iters: 200, learning_rate: 0.3, patience: 4 }
    }
}

impl HardPromptSettings {
    pub fn from_config(cfg: &crate::config::AnchorConfig) -> Self {
        HardPromptSettings {
            length: cfg.length,
            iters: cfg.iters,
            learning_rate: cfg.learning_rate,
            patience: cfg.patience,
        }
    }
}

/// Search for a vocabulary prompt whose text encoding aligns with the image
/// embedding: multi-start projected gradient ascent on cosine similarity.
///
/// Each iteration projects the continuous prompt onto the vocabulary,
/// encodes the projection, and ascends the similarity with straight-through
/// gradients (the projection is treated as identity). The best projected
/// prompt ever evaluated is returned, so the result never scores below its
/// initialization, and a longer budget can only match or improve the result
/// for the same seed. Stalls trigger a restart from the next entry of a
/// seed-shuffled tour through the vocabulary, which for single-token prompts
/// makes the search exhaustive given enough budget.
pub fn hard_prompt_invert(
    bundle: &BackendBundle,
    image: &RgbImage,
    image_id: &str,
    settings: &HardPromptSettings,
    seed: u64,
) -> Result<AnchorPrompt> {
    let _guard = bundle.gradient_context()?;
    hard_prompt_invert_inner(bundle, image, image_id, settings, seed)
}

/// Same as [`hard_prompt_invert`] for callers already holding the bundle's
/// gradient context.
pub(crate) fn hard_prompt_invert_inner(
    bundle: &BackendBundle,
    image: &RgbImage,
    image_id: &str,
    settings: &HardPromptSettings,
    seed: u64,
) -> Result<AnchorPrompt> {
    if settings.length == 0 {
        return Err(Error::InvalidConfig("hard prompt length must be at least 1".into()));
    }
    if settings.length > bundle.max_sequence_len() {
        return Err(Error::SequenceTooLong {
            len: settings.length,
            max: bundle.max_sequence_len(),
        });
    }
    let vocab = bundle.vocab();
    let target = bundle.encode_image(image)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tour: Vec<TokenId> = (0..vocab.size()).collect();
    tour.shuffle(&mut rng);
    let mut tour_pos = 0;
    let mut next_init = |vocab: &VocabTable| -> Result<Array2<f64>> {
        let ids: Vec<TokenId> = (0..settings.length)
            .map(|_| {
                let id = tour[tour_pos % tour.len()];
                tour_pos += 1;
                id
            })
            .collect();
        vocab.rows_for(&ids)
    };

    let mut prompt = next_init(vocab)?;
    let mut best_sim = f64::NEG_INFINITY;
    let mut best: Option<(Vec<TokenId>, Array2<f64>)> = None;
    let mut stall = 0usize;

    let evaluate = |prompt: &Array2<f64>,
                        best_sim: &mut f64,
                        best: &mut Option<(Vec<TokenId>, Array2<f64>)>,
                        stall: &mut usize|
     -> Result<(f64, Array2<f64>)> {
        let (ids, projected) = project_to_vocab(prompt, vocab)?;
        let encoded = bundle.encode_rows(&projected)?;
        let sim = crate::embedding::cosine_similarity(&encoded, &target)?;
        if sim > *best_sim {
            *best_sim = sim;
            *best = Some((ids, projected.clone()));
            *stall = 0;
        } else {
            *stall += 1;
        }
        Ok((sim, projected))
    };

    for _ in 0..settings.iters {
        let (_, projected) = evaluate(&prompt, &mut best_sim, &mut best, &mut stall)?;
        if stall > settings.patience {
            prompt = next_init(vocab)?;
            stall = 0;
            continue;
        }
        // Ascend the similarity at the projected point; straight-through
        // moves the continuous prompt by the projected gradient.
        let encoded = bundle.encode_rows(&projected)?;
        let grad_out = similarity_grad(&encoded, &target);
        let grad_rows = bundle.encode_rows_vjp(&projected, &grad_out)?;
        prompt = &prompt + &(settings.learning_rate * &grad_rows);
    }
    // Account for the final state too, so every gradient step can pay off.
    evaluate(&prompt, &mut best_sim, &mut best, &mut stall)?;

    let (ids, embeddings) = best.expect("at least one prompt evaluated");
    let text = vocab.decode(&ids)?;
    Ok(AnchorPrompt {
        token_ids: Some(ids),
        embeddings,
        source: AnchorSource::Pez,
        target_image_id: image_id.to_string(),
        text,
    })
}

/// Gradient of `cos(e, target)` with respect to `e` (zero when `e` is zero).
fn similarity_grad(e: &EmbeddingVector, target: &EmbeddingVector) -> ndarray::Array1<f64> {
    let x = &e.values;
    let v = &target.values;
    let nx = x.dot(x).sqrt();
    let nv = v.dot(v).sqrt();
    if nx == 0.0 || nv == 0.0 {
        return ndarray::Array1::zeros(x.len());
    }
    v / (nx * nv) - (x.dot(v) / (nx.powi(3) * nv)) * x
}
