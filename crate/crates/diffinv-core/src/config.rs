//! Configuration sections for the backend, anchoring, inversion, and
//! generation stages. The CLI wraps these into one run-level file; library
//! callers can construct them directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which backend to load and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// One of `mock`, `sd21`, `sdxl`.
    pub name: String,
    /// Seed for the deterministic mock's weights.
    pub mock_seed: u64,
    /// Checkpoint identifiers for real adapters, keyed by role
    /// (e.g. `unet`, `clip`, `captioner`). Never used by the mock.
    pub checkpoints: BTreeMap<String, String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { name: "mock".to_string(), mock_seed: 0, checkpoints: BTreeMap::new() }
    }
}

/// How anchor prompts for input images are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Hard-prompt inversion: projected gradient ascent over vocab tokens.
    Pez,
    /// Tokenized captioner output (the fast default).
    Caption,
    /// Captions supplied by the caller.
    User,
}

/// Anchor-prompt settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub mode: AnchorMode,
    /// Prompt length (token rows) for hard-prompt inversion.
    pub length: usize,
    /// Total optimization step budget for hard-prompt inversion.
    pub iters: usize,
    /// Ascent step size for hard-prompt inversion.
    pub learning_rate: f64,
    /// Steps without improvement before the search restarts from a fresh
    /// vocab initialization.
    pub patience: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            mode: AnchorMode::Caption,
            length: 8,
            iters: 200,
            learning_rate: 0.3,
            patience: 4,
        }
    }
}

/// Soft tokens stay continuous; hard tokens are projected onto the vocab on
/// every forward pass (straight-through gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Soft,
    Hard,
}

/// How the trainable token matrix is bridged into the joint embedding space
/// for the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipBridge {
    /// Encode the token matrix alone through the text encoder's
    /// embedding-passthrough path (default).
    Encode,
    /// Mean-pool the token rows first, then encode the single pooled row.
    MeanpoolProject,
}

/// Hyperparameters of the difference-token optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// Number of trainable token rows.
    pub n_tokens: usize,
    /// Interpolation weight pulling the target delta toward the text delta.
    pub alpha: f64,
    /// Weight of the token-consistency term.
    pub lambda_tc: f64,
    /// Weight of the alignment term.
    pub lambda_clip: f64,
    /// Gradient-descent step size. Unset picks a backend-appropriate
    /// default: 1e-2 on the mock, 1e-3 on real adapters.
    pub learning_rate: Option<f64>,
    /// Optimization step count.
    pub iterations: usize,
    /// Soft (continuous) or hard (vocab-projected) tokens.
    pub mode: TokenMode,
    /// Use Adam instead of plain gradient descent.
    pub adaptive: bool,
    /// Bridge from token rows to one joint-space vector for the alignment
    /// term.
    pub clip_bridge: ClipBridge,
    /// Unit-normalize the image and text deltas before interpolation.
    pub normalize_deltas: bool,
    /// Half-open `[lo, hi)` range the per-step timesteps are drawn from.
    /// Unset means the full schedule.
    pub timestep_range: Option<[usize; 2]>,
    /// Seed for timestep and noise draws.
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            n_tokens: 5,
            alpha: 0.8,
            lambda_tc: 0.01,
            lambda_clip: 6.0,
            learning_rate: None,
            iterations: 500,
            mode: TokenMode::Soft,
            adaptive: false,
            clip_bridge: ClipBridge::Encode,
            normalize_deltas: false,
            timestep_range: None,
            seed: 0,
        }
    }
}

impl InversionConfig {
    /// Step size, falling back to a backend-appropriate default.
    pub fn effective_learning_rate(&self, backend_name: &str) -> f64 {
        self.learning_rate.unwrap_or(if backend_name == "mock" { 1e-2 } else { 1e-3 })
    }

    /// Resolve the timestep draw range against a schedule of length `t_max`.
    pub fn effective_timestep_range(&self, t_max: usize) -> Result<(usize, usize)> {
        match self.timestep_range {
            None => Ok((0, t_max)),
            Some([lo, hi]) => {
                if lo >= hi || hi > t_max {
                    return Err(Error::InvalidConfig(format!(
                        "timestep_range [{lo}, {hi}) must be non-empty and lie within [0, {t_max})"
                    )));
                }
                Ok((lo, hi))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::InvalidConfig("n_tokens must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange { alpha: self.alpha });
        }
        for (name, v) in [("lambda_tc", self.lambda_tc), ("lambda_clip", self.lambda_clip)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if let Some(lr) = self.learning_rate
            && (!lr.is_finite() || lr <= 0.0)
        {
            return Err(Error::InvalidConfig("learning_rate must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Generation settings for applying difference tokens to a query image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Fraction of the denoising trajectory to re-run; 0 copies the query
    /// image through the latent codec untouched.
    pub strength: f64,
    /// Sampler step count over the full schedule.
    pub steps: usize,
    /// Classifier-free guidance weight for the re-denoise phase.
    pub guidance: f64,
    /// Seed for the noise-injection fallback on backends without inversion
    /// support.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { strength: 0.7, steps: 50, guidance: 7.5, seed: 0 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidConfig(format!(
                "pipeline strength {} outside [0, 1]",
                self.strength
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("pipeline steps must be at least 1".into()));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::InvalidConfig("guidance must be finite and >= 0".into()));
        }
        Ok(())
    }
}
