//! Content-addressed cache for captions and hard-prompt anchors.
//!
//! Keys hash the image pixels plus every parameter that can change the
//! cached value, so hyperparameter sweeps that leave the anchoring stage
//! untouched (different α, different token counts) reuse the expensive
//! captioner and prompt-search results for free. The cache root is
//! `$DIFFINV_CACHE` when set, else `<output_dir>/_cache`.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;
use sha2::{Digest, Sha256};

use diffinv_core::{AnchorPrompt, BackendBundle, HardPromptSettings, hard_prompt_invert};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Hit/miss totals, reported in the run summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub caption_hits: u64,
    pub caption_misses: u64,
    pub anchor_hits: u64,
    pub anchor_misses: u64,
}

impl CacheStats {
    pub fn add(&mut self, other: &CacheStats) {
        self.caption_hits += other.caption_hits;
        self.caption_misses += other.caption_misses;
        self.anchor_hits += other.anchor_hits;
        self.anchor_misses += other.anchor_misses;
    }
}

/// The cache root for a configuration: the `DIFFINV_CACHE` environment
/// variable when set, else `_cache` under the output directory.
pub fn cache_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("DIFFINV_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.join("_cache"),
    }
}

/// One directory of cached captions and anchors.
#[derive(Debug)]
pub struct ArtifactCache {
    captions: PathBuf,
    anchors: PathBuf,
    stats: CacheStats,
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_image(hasher: &mut Sha256, image: &RgbImage) {
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
}

impl ArtifactCache {
    pub fn open(root: &Path) -> Result<Self> {
        let captions = root.join("captions");
        let anchors = root.join("anchors");
        for dir in [&captions, &anchors] {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.clone(), e))?;
        }
        Ok(ArtifactCache { captions, anchors, stats: CacheStats::default() })
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Caption an image through the cache. `backend_tag` must identify the
    /// captioner (backend name plus its seed) so different backends never
    /// share entries.
    pub fn caption(
        &mut self,
        bundle: &BackendBundle,
        backend_tag: &str,
        image: &RgbImage,
    ) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(b"caption\0");
        hasher.update(backend_tag.as_bytes());
        hasher.update([0]);
        hash_image(&mut hasher, image);
        let path = self.captions.join(format!("{}.txt", hex_digest(hasher)));

        if path.exists() {
            self.stats.caption_hits += 1;
            return std::fs::read_to_string(&path).map_err(|e| CliError::io(path, e));
        }
        self.stats.caption_misses += 1;
        let text = bundle.caption(image)?;
        std::fs::write(&path, &text).map_err(|e| CliError::io(path, e))?;
        Ok(text)
    }

    /// Run hard-prompt inversion through the cache. The key covers the
    /// search hyperparameters and seed as well as the image.
    pub fn pez_anchor(
        &mut self,
        bundle: &BackendBundle,
        backend_tag: &str,
        image: &RgbImage,
        image_id: &str,
        settings: &HardPromptSettings,
        seed: u64,
    ) -> Result<AnchorPrompt> {
        let mut hasher = Sha256::new();
        hasher.update(b"anchor-pez\0");
        hasher.update(backend_tag.as_bytes());
        hasher.update([0]);
        hasher.update(settings.length.to_le_bytes());
        hasher.update(settings.iters.to_le_bytes());
        hasher.update(settings.learning_rate.to_bits().to_le_bytes());
        hasher.update(settings.patience.to_le_bytes());
        hasher.update(seed.to_le_bytes());
        hash_image(&mut hasher, image);
        let key = hex_digest(hasher);
        let sidecar = self.anchors.join(format!("{key}.txt"));
        let tensor = self.anchors.join(format!("{key}.npy"));

        if sidecar.exists() && tensor.exists() {
            self.stats.anchor_hits += 1;
            let embeddings = diffinv_core::tensor_io::read_matrix(&tensor)?;
            let prompt =
                AnchorPrompt::read_sidecar(&sidecar, embeddings, bundle.vocab(), image_id)?;
            return Ok(prompt);
        }
        self.stats.anchor_misses += 1;
        let prompt = hard_prompt_invert(bundle, image, image_id, settings, seed)?;
        diffinv_core::tensor_io::write_matrix(&tensor, &prompt.embeddings)?;
        prompt.write_sidecar(&sidecar)?;
        Ok(prompt)
    }
}
