//! Run-level configuration: one TOML file wrapping the library's config
//! sections, plus command-line overrides, a canonical serialization, and the
//! content hash that names run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffinv_core::{AnchorConfig, BackendConfig, InversionConfig, PipelineConfig};

use crate::error::{CliError, Result};

/// Evaluation and batch-execution settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// How many triplets to sample from the dataset.
    pub count: usize,
    /// Score with the secondary (structure-oriented) encoder as well.
    pub dino: bool,
    /// Worker threads for batch runs. Not part of the config hash: it only
    /// changes scheduling, never artifact content.
    pub jobs: usize,
    /// Dataset manifest (JSON lines, one edit pair per line).
    pub dataset: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { count: 300, dino: true, jobs: 1, dataset: None }
    }
}

/// The full run configuration. `output_dir` is first so the TOML form keeps
/// plain values ahead of the section tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root directory receiving one subdirectory per run id.
    pub output_dir: PathBuf,
    pub backend: BackendConfig,
    pub anchor: AnchorConfig,
    pub optim: InversionConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            backend: BackendConfig::default(),
            anchor: AnchorConfig::default(),
            optim: InversionConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The slice of the configuration that determines artifact content. Leaves
/// out `output_dir` (moving a run root must not re-key its runs) and
/// `eval.jobs` (scheduling only).
#[derive(Serialize)]
struct HashedView<'a> {
    backend: &'a BackendConfig,
    anchor: &'a AnchorConfig,
    optim: &'a InversionConfig,
    pipeline: &'a PipelineConfig,
    eval: HashedEvalView<'a>,
}

#[derive(Serialize)]
struct HashedEvalView<'a> {
    count: usize,
    dino: bool,
    dataset: &'a Option<PathBuf>,
}

/// Command-line overrides applied on top of the loaded file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Sets both `optim.seed` and `pipeline.seed`.
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub alpha: Option<f64>,
    pub tokens: Option<usize>,
    pub lambda_tc: Option<f64>,
    pub lambda_clip: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub count: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a TOML file. Unknown keys anywhere are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| CliError::Config(format!("in {}: {e}", path.display())))
    }

    /// Parse TOML text into a config.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.optim.seed = seed;
            self.pipeline.seed = seed;
        }
        if let Some(backend) = &ov.backend {
            self.backend.name = backend.clone();
        }
        if let Some(alpha) = ov.alpha {
            self.optim.alpha = alpha;
        }
        if let Some(tokens) = ov.tokens {
            self.optim.n_tokens = tokens;
        }
        if let Some(v) = ov.lambda_tc {
            self.optim.lambda_tc = v;
        }
        if let Some(v) = ov.lambda_clip {
            self.optim.lambda_clip = v;
        }
        if let Some(dataset) = &ov.dataset {
            self.eval.dataset = Some(dataset.clone());
        }
        if let Some(count) = ov.count {
            self.eval.count = count;
        }
        if let Some(dir) = &ov.output_dir {
            self.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.pipeline.validate()?;
        if self.eval.jobs == 0 {
            return Err(CliError::Config("eval.jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML of the content-determining configuration slice. This
    /// exact text is written to every `config.snapshot`.
    pub fn canonical_toml(&self) -> Result<String> {
        let view = HashedView {
            backend: &self.backend,
            anchor: &self.anchor,
            optim: &self.optim,
            pipeline: &self.pipeline,
            eval: HashedEvalView {
                count: self.eval.count,
                dino: self.eval.dino,
                dataset: &self.eval.dataset,
            },
        };
        toml::to_string(&view)
            .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Lowercase hex SHA-256 of the canonical TOML.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = self.canonical_toml()?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Run identifier: `run-` plus the first 12 hash characters.
    pub fn run_id(&self) -> Result<String> {
        Ok(format!("run-{}", &self.config_hash()?[..12]))
    }

    /// Directory holding this configuration's artifacts.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(self.run_id()?))
    }

    /// Dataset manifest path or a configuration error naming the fix.
    pub fn dataset_path(&self) -> Result<&Path> {
        self.eval.dataset.as_deref().ok_or_else(|| {
            CliError::Config(
                "no dataset manifest configured: set eval.dataset in the config \
                 file or pass --dataset"
                    .into(),
            )
        })
    }
}
