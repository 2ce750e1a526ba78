//! Preview the triplet sample a configuration would run.

use crate::config::RunConfig;
use crate::dataset::{SampleSummary, sample_from_manifest};
use crate::error::Result;

/// Sample and print the triplet list without running anything.
pub fn sample_preview(cfg: &RunConfig) -> Result<SampleSummary> {
    let manifest = cfg.dataset_path()?;
    let summary = sample_from_manifest(manifest, cfg.eval.count, cfg.optim.seed)?;
    for t in &summary.triplets {
        println!(
            "{}  A={}  B={}  instruction={:?}",
            t.id,
            t.path_a.display(),
            t.path_b.display(),
            t.instruction_text.as_deref().unwrap_or(""),
        );
    }
    println!(
        "{} triplet(s) from {} requested; {} singleton pair(s) skipped{}",
        summary.triplets.len(),
        summary.requested,
        summary.skipped_singleton_pairs,
        if summary.truncated { " (fewer eligible pairs than requested)" } else { "" },
    );
    Ok(summary)
}
