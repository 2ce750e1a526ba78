//! Learn difference tokens for one triplet and persist the artifacts.

use std::path::Path;

use diffinv_core::{InversionInputs, artifact, optimize, tensor_io};

use crate::cache::ArtifactCache;
use crate::config::RunConfig;
use crate::dataset::TripletRecord;
use crate::error::Result;

use super::{
    BundleSlot, anchor_for_image, backend_tag, diverged_marker, gate_write,
    invert_outputs_present, triplet_seed, write_diverged_marker, write_snapshot,
    PROMPT_AFTER_TENSOR, PROMPT_BEFORE_TENSOR,
};

/// What one triplet's inversion did.
#[derive(Debug, Clone)]
pub struct InvertStatus {
    pub triplet_id: String,
    /// Existing artifacts matched the config and were reused untouched.
    pub resumed: bool,
    pub diverged: bool,
    pub divergence_iteration: Option<usize>,
    /// Total loss of the last recorded trace row.
    pub final_total: Option<f64>,
}

/// Invert one triplet into `<run_dir>/<triplet_id>/`. Completed directories
/// whose snapshot matches are returned as resumed without building the
/// backend; a recorded divergence is likewise final until the config
/// changes or `--force` clears it.
pub fn invert_triplet(
    cfg: &RunConfig,
    canonical: &str,
    run_dir: &Path,
    triplet: &TripletRecord,
    slot: &mut BundleSlot<'_>,
    cache: &mut ArtifactCache,
    force: bool,
) -> Result<InvertStatus> {
    super::check_anchor_mode(cfg)?;
    let tdir = run_dir.join(&triplet.id);
    let reusable = gate_write(&tdir, canonical, force)?;
    if reusable {
        if invert_outputs_present(&tdir) {
            let trace = artifact::read_trace(&tdir.join(artifact::TRACE_FILE))?;
            return Ok(InvertStatus {
                triplet_id: triplet.id.clone(),
                resumed: true,
                diverged: false,
                divergence_iteration: None,
                final_total: trace.last().map(|r| r.total),
            });
        }
        if let Some(iteration) = diverged_marker(&tdir) {
            return Ok(InvertStatus {
                triplet_id: triplet.id.clone(),
                resumed: true,
                diverged: true,
                divergence_iteration: Some(iteration),
                final_total: None,
            });
        }
    }

    let bundle = slot.get()?;
    let model = triplet.load_model_view()?;
    let id_a = format!("{}/a", triplet.id);
    let id_ap = format!("{}/aprime", triplet.id);

    // Captions feed the text delta in every anchor mode, so they are always
    // fetched (through the cache).
    let tag = backend_tag(cfg);
    let caption_a = cache.caption(bundle, &tag, &model.before)?;
    let caption_ap = cache.caption(bundle, &tag, &model.after)?;

    let anchor_a = anchor_for_image(
        cfg, bundle, cache, &model.before, &id_a, Some(&caption_a), &triplet.id, "anchor-a",
    )?;
    let anchor_ap = anchor_for_image(
        cfg, bundle, cache, &model.after, &id_ap, Some(&caption_ap), &triplet.id, "anchor-aprime",
    )?;

    let mut inputs = InversionInputs::new(&model.before, &model.after, id_a, id_ap);
    inputs.caption_before = Some(caption_a);
    inputs.caption_after = Some(caption_ap);
    inputs.anchors = Some((anchor_a, anchor_ap));

    let mut optim = cfg.optim.clone();
    optim.seed = triplet_seed(cfg.optim.seed, &triplet.id, "optim");

    let outcome = optimize(bundle, &inputs, &cfg.anchor, &optim)?;

    artifact::write_trace(&tdir.join(artifact::TRACE_FILE), &outcome.trace)?;
    outcome.anchor_before.write_sidecar(&tdir.join(artifact::PROMPT_BEFORE_FILE))?;
    outcome.anchor_after.write_sidecar(&tdir.join(artifact::PROMPT_AFTER_FILE))?;
    tensor_io::write_matrix(&tdir.join(PROMPT_BEFORE_TENSOR), &outcome.anchor_before.embeddings)?;
    tensor_io::write_matrix(&tdir.join(PROMPT_AFTER_TENSOR), &outcome.anchor_after.embeddings)?;

    if outcome.diverged {
        let iteration = outcome.divergence_iteration.unwrap_or(0);
        write_diverged_marker(&tdir, iteration)?;
        write_snapshot(&tdir, canonical)?;
        return Ok(InvertStatus {
            triplet_id: triplet.id.clone(),
            resumed: false,
            diverged: true,
            divergence_iteration: Some(iteration),
            final_total: None,
        });
    }

    artifact::write_tokens(&tdir, &outcome.tokens.embeddings)?;
    artifact::write_token_listing(
        &tdir.join(artifact::TOKEN_LISTING_FILE),
        &outcome.projected_ids,
        &outcome.projected_tokens,
    )?;
    // A stale marker from an interrupted earlier attempt must not outlive a
    // successful pass.
    let _ = std::fs::remove_file(tdir.join(super::DIVERGED_FILE));
    // The snapshot is the completion marker, so it goes last.
    write_snapshot(&tdir, canonical)?;

    Ok(InvertStatus {
        triplet_id: triplet.id.clone(),
        resumed: false,
        diverged: false,
        divergence_iteration: None,
        final_total: outcome.trace.last().map(|r| r.total),
    })
}
