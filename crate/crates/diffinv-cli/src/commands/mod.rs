//! Command implementations and the plumbing they share: lazy backend
//! construction with an optional text audit, config-snapshot gating,
//! per-triplet seed derivation, and anchor-prompt acquisition.

pub mod evaluate;
pub mod generate;
pub mod grid;
pub mod invert;
pub mod run;
pub mod sample;

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use sha2::{Digest, Sha256};

use diffinv_core::backends::{BackendBundle, CallCounts};
use diffinv_core::config::AnchorMode;
use diffinv_core::{
    AnchorPrompt, AnchorSource, HardPromptSettings, artifact, build_backend,
    anchoring::prompt_from_text,
};

use crate::cache::ArtifactCache;
use crate::config::RunConfig;
use crate::dataset::SampleSummary;
use crate::error::{CliError, Result};

/// Marker file a diverged inversion leaves beside its trace.
pub const DIVERGED_FILE: &str = "diverged.txt";
/// Sidecar describing the query image's anchor prompt.
pub const PROMPT_QUERY_FILE: &str = "prompt_b.txt";
/// Anchor embedding matrices stored beside the text sidecars.
pub const PROMPT_BEFORE_TENSOR: &str = "prompt_a.tensor";
pub const PROMPT_AFTER_TENSOR: &str = "prompt_aprime.tensor";
pub const PROMPT_QUERY_TENSOR: &str = "prompt_b.tensor";
/// The sampled triplet list, written once per run directory.
pub const TRIPLETS_FILE: &str = "triplets.json";
/// Run-level execution summary.
pub const RUN_SUMMARY_FILE: &str = "run_summary.json";
/// Run-level directional-score summary.
pub const SCORES_SUMMARY_FILE: &str = "scores_summary.json";
/// Run-level A | A′ | B | B′ grid image.
pub const SUMMARY_GRID_FILE: &str = "summary_grid.png";
/// When set, every text string handed to the backend is appended to this
/// file — an auditable record that redacted fields never reach the model.
pub const TEXT_AUDIT_ENV: &str = "DIFFINV_TEXT_AUDIT";

/// Identifies the backend instance for cache keys.
pub(crate) fn backend_tag(cfg: &RunConfig) -> String {
    format!("{}-s{}", cfg.backend.name, cfg.backend.mock_seed)
}

/// Stable per-triplet sub-seed: hash of (base seed, role, triplet id).
pub(crate) fn triplet_seed(base: u64, triplet_id: &str, role: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(role.as_bytes());
    hasher.update([0]);
    hasher.update(triplet_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

/// Lazily built backend bundle. Commands that find all their artifacts
/// already present never touch the slot, so resumed work provably performs
/// zero backend calls.
pub struct BundleSlot<'a> {
    cfg: &'a RunConfig,
    audit: Option<PathBuf>,
    bundle: Option<BackendBundle>,
}

impl<'a> BundleSlot<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        let audit = std::env::var_os(TEXT_AUDIT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        BundleSlot { cfg, audit, bundle: None }
    }

    pub fn built(&self) -> bool {
        self.bundle.is_some()
    }

    pub fn get(&mut self) -> Result<&BackendBundle> {
        if self.bundle.is_none() {
            let bundle = build_backend(&self.cfg.backend)?;
            if self.audit.is_some() {
                bundle.enable_text_tap();
            }
            self.bundle = Some(bundle);
        }
        Ok(self.bundle.as_ref().expect("just built"))
    }

    /// Drain the text audit (if enabled) and hand back the bundle's call
    /// totals; `None` when the bundle was never built.
    pub fn finish(self) -> Result<Option<CallCounts>> {
        let Some(bundle) = self.bundle else {
            return Ok(None);
        };
        if let Some(path) = &self.audit {
            let lines = bundle.take_text_tap();
            if !lines.is_empty() {
                let mut file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| CliError::io(path.clone(), e))?;
                for line in lines {
                    writeln!(file, "{}", line.replace('\n', "\\n"))
                        .map_err(|e| CliError::io(path.clone(), e))?;
                }
            }
        }
        Ok(Some(bundle.call_counts()))
    }
}

/// Relation between a directory's config snapshot and the current config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Snapshot {
    Absent,
    Match,
    Mismatch,
}

pub(crate) fn snapshot_state(dir: &Path, canonical: &str) -> Result<Snapshot> {
    let path = dir.join(artifact::CONFIG_SNAPSHOT_FILE);
    if !path.exists() {
        return Ok(Snapshot::Absent);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(path, e))?;
    Ok(if text == canonical { Snapshot::Match } else { Snapshot::Mismatch })
}

pub(crate) fn write_snapshot(dir: &Path, canonical: &str) -> Result<()> {
    let path = dir.join(artifact::CONFIG_SNAPSHOT_FILE);
    std::fs::write(&path, canonical).map_err(|e| CliError::io(path, e))
}

/// Gate a directory that is about to be (re)written. Returns true when its
/// existing artifacts match the config and may be reused. A mismatch aborts
/// unless `force`, which clears the directory for a clean rebuild.
pub(crate) fn gate_write(dir: &Path, canonical: &str, force: bool) -> Result<bool> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.to_path_buf(), e))?;
    match snapshot_state(dir, canonical)? {
        Snapshot::Match => Ok(true),
        Snapshot::Absent => Ok(false),
        Snapshot::Mismatch if force => {
            std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir.to_path_buf(), e))?;
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.to_path_buf(), e))?;
            Ok(false)
        }
        Snapshot::Mismatch => Err(CliError::SnapshotMismatch {
            path: dir.join(artifact::CONFIG_SNAPSHOT_FILE),
        }),
    }
}

/// Gate a directory that is only read (scoring, grids). A mismatch aborts
/// unless `force`, which proceeds without touching anything.
pub(crate) fn gate_read(dir: &Path, canonical: &str, force: bool) -> Result<()> {
    match snapshot_state(dir, canonical)? {
        Snapshot::Mismatch if !force => Err(CliError::SnapshotMismatch {
            path: dir.join(artifact::CONFIG_SNAPSHOT_FILE),
        }),
        _ => Ok(()),
    }
}

/// All files a completed inversion leaves behind.
pub(crate) fn invert_outputs_present(tdir: &Path) -> bool {
    [artifact::TOKENS_FILE, artifact::TOKEN_LISTING_FILE, artifact::TRACE_FILE]
        .iter()
        .all(|f| tdir.join(f).exists())
}

/// Iteration recorded in a divergence marker, when one exists.
pub(crate) fn diverged_marker(tdir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(tdir.join(DIVERGED_FILE)).ok()?;
    text.trim().parse().ok()
}

pub(crate) fn write_diverged_marker(tdir: &Path, iteration: usize) -> Result<()> {
    let path = tdir.join(DIVERGED_FILE);
    std::fs::write(&path, format!("{iteration}\n")).map_err(|e| CliError::io(path, e))
}

/// Flat copy-name of a generated image in the run directory root.
pub(crate) fn flat_bprime_name(triplet_id: &str, seed: u64) -> String {
    format!("{triplet_id}_bprime_seed{seed}.png")
}

/// Build the anchor prompt for one image under the configured mode, going
/// through the cache for the expensive search mode. The caption text is
/// only consulted in caption mode.
pub(crate) fn anchor_for_image(
    cfg: &RunConfig,
    bundle: &BackendBundle,
    cache: &mut ArtifactCache,
    image: &RgbImage,
    image_id: &str,
    caption: Option<&str>,
    triplet_id: &str,
    seed_role: &str,
) -> Result<AnchorPrompt> {
    match cfg.anchor.mode {
        AnchorMode::Caption => {
            let text = caption.ok_or_else(|| {
                CliError::Config("caption mode requires a caption".into())
            })?;
            Ok(prompt_from_text(bundle.vocab(), text, AnchorSource::Caption, image_id)?)
        }
        AnchorMode::Pez => cache.pez_anchor(
            bundle,
            &backend_tag(cfg),
            image,
            image_id,
            &HardPromptSettings::from_config(&cfg.anchor),
            triplet_seed(cfg.optim.seed, triplet_id, seed_role),
        ),
        AnchorMode::User => Err(CliError::Config(
            "anchor.mode = \"user\" expects caller-supplied captions, which dataset \
             manifests do not carry; use \"caption\" or \"pez\" for CLI runs"
                .into(),
        )),
    }
}

/// Reject modes the CLI cannot serve before any work starts.
pub(crate) fn check_anchor_mode(cfg: &RunConfig) -> Result<()> {
    if cfg.anchor.mode == AnchorMode::User {
        return Err(CliError::Config(
            "anchor.mode = \"user\" expects caller-supplied captions, which dataset \
             manifests do not carry; use \"caption\" or \"pez\" for CLI runs"
                .into(),
        ));
    }
    Ok(())
}

pub(crate) fn write_triplets_json(run_dir: &Path, summary: &SampleSummary) -> Result<()> {
    let path = run_dir.join(TRIPLETS_FILE);
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Config(format!("cannot serialize triplet list: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_triplets_json(run_dir: &Path) -> Result<SampleSummary> {
    let path = run_dir.join(TRIPLETS_FILE);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path,
            hint: "no sampled triplet list; run `diffinv run` or `diffinv invert` first".into(),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(path.clone(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("corrupt {}: {e}", path.display())))
}
