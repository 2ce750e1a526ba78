//! Apply stored difference tokens to one triplet's query image.

use std::path::{Path, PathBuf};

use diffinv_core::inversion::DiffTokens;
use diffinv_core::{artifact, generate_bprime, tensor_io};

use crate::cache::ArtifactCache;
use crate::config::RunConfig;
use crate::dataset::{TripletRecord, decode_image};
use crate::error::{CliError, Result};
use crate::fixtures::save_png;

use super::{
    BundleSlot, anchor_for_image, backend_tag, diverged_marker, flat_bprime_name, gate_write,
    write_snapshot, PROMPT_QUERY_FILE, PROMPT_QUERY_TENSOR,
};

/// Records which token sign produced `bprime.png`.
const SIGN_FILE: &str = "bprime.sign";

/// What one triplet's generation did.
#[derive(Debug, Clone)]
pub struct GenerateStatus {
    pub triplet_id: String,
    pub resumed: bool,
    /// The backend could not invert latents, so seeded noise injection was
    /// used to reach the starting noise level.
    pub fallback_img2img: bool,
    /// Path of `bprime.png` inside the triplet directory.
    pub output: PathBuf,
}

/// Generate B′ for one triplet from its stored tokens. Requires a completed
/// inversion in the same run directory; a recorded divergence or absent
/// token tensor is a missing-artifact failure.
pub fn generate_triplet(
    cfg: &RunConfig,
    canonical: &str,
    run_dir: &Path,
    triplet: &TripletRecord,
    slot: &mut BundleSlot<'_>,
    cache: &mut ArtifactCache,
    force: bool,
    reverse: bool,
) -> Result<GenerateStatus> {
    super::check_anchor_mode(cfg)?;
    let tdir = run_dir.join(&triplet.id);
    let reusable = gate_write(&tdir, canonical, force)?;

    let tokens_path = tdir.join(artifact::TOKENS_FILE);
    if !tokens_path.exists() {
        let hint = if diverged_marker(&tdir).is_some() {
            "inversion diverged for this triplet, so no tokens exist".to_string()
        } else {
            "run `diffinv invert` first".to_string()
        };
        return Err(CliError::MissingArtifact { path: tokens_path, hint });
    }

    let bprime_path = tdir.join(artifact::EDITED_IMAGE_FILE);
    let flat_path = run_dir.join(flat_bprime_name(&triplet.id, cfg.pipeline.seed));
    // The token sign is a command flag, not config, so it gets its own
    // marker: an output generated under the other sign is regenerated
    // rather than reused.
    let sign = if reverse { "-1" } else { "+1" };
    let sign_path = tdir.join(SIGN_FILE);
    let sign_matches =
        std::fs::read_to_string(&sign_path).is_ok_and(|s| s.trim() == sign);
    if reusable && sign_matches && bprime_path.exists() && flat_path.exists() {
        return Ok(GenerateStatus {
            triplet_id: triplet.id.clone(),
            resumed: true,
            fallback_img2img: false,
            output: bprime_path,
        });
    }

    let bundle = slot.get()?;
    let query = decode_image(&triplet.path_b)?;
    let id_b = format!("{}/b", triplet.id);

    let caption_b = match cfg.anchor.mode {
        diffinv_core::config::AnchorMode::Caption => {
            Some(cache.caption(bundle, &backend_tag(cfg), &query)?)
        }
        _ => None,
    };
    let anchor_b = anchor_for_image(
        cfg, bundle, cache, &query, &id_b, caption_b.as_deref(), &triplet.id, "anchor-b",
    )?;

    let matrix = artifact::read_tokens(&tdir)?;
    let mut tokens = DiffTokens::from_matrix(matrix, cfg.optim.mode);
    if reverse {
        tokens = tokens.negated();
    }

    let outcome = generate_bprime(bundle, &query, &anchor_b.embeddings, &tokens, &cfg.pipeline)?;

    save_png(&outcome.image, &bprime_path)?;
    std::fs::copy(&bprime_path, &flat_path)
        .map_err(|e| CliError::io(flat_path.clone(), e))?;
    std::fs::write(&sign_path, format!("{sign}\n"))
        .map_err(|e| CliError::io(sign_path.clone(), e))?;
    anchor_b.write_sidecar(&tdir.join(PROMPT_QUERY_FILE))?;
    tensor_io::write_matrix(&tdir.join(PROMPT_QUERY_TENSOR), &anchor_b.embeddings)?;
    write_snapshot(&tdir, canonical)?;

    Ok(GenerateStatus {
        triplet_id: triplet.id.clone(),
        resumed: false,
        fallback_img2img: outcome.fallback_img2img,
        output: bprime_path,
    })
}
