//! Score an existing run directory and write the report files.

use std::path::{Path, PathBuf};

use diffinv_core::evalharness::DirectionalScoreReport;
use diffinv_core::{artifact, eval_encoders, score_triplet};

use crate::config::RunConfig;
use crate::dataset::decode_image;
use crate::error::{CliError, Result};

use super::{diverged_marker, gate_read, read_triplets_json, SCORES_SUMMARY_FILE};

/// Score every generated triplet in a run directory. `run_dir` defaults to
/// the directory the configuration names. Triplets with a recorded
/// divergence are skipped; a missing B′ without one is an error.
pub fn evaluate_run(
    cfg: &RunConfig,
    run_dir_override: Option<&Path>,
    force: bool,
) -> Result<DirectionalScoreReport> {
    cfg.validate()?;
    let canonical = cfg.canonical_toml()?;
    let run_dir: PathBuf = match run_dir_override {
        Some(d) => d.to_path_buf(),
        None => cfg.run_dir()?,
    };
    gate_read(&run_dir, &canonical, force)?;

    let sample = read_triplets_json(&run_dir)?;
    let encoders = eval_encoders(&cfg.backend, cfg.eval.dino)?;

    let mut rows = Vec::new();
    let mut skipped_diverged = 0usize;
    for t in &sample.triplets {
        let tdir = run_dir.join(&t.id);
        let bprime_path = tdir.join(artifact::EDITED_IMAGE_FILE);
        if !bprime_path.exists() {
            if diverged_marker(&tdir).is_some() {
                skipped_diverged += 1;
                continue;
            }
            return Err(CliError::MissingArtifact {
                path: bprime_path,
                hint: "no generated image; run `diffinv generate` or `diffinv run` first".into(),
            });
        }
        let before = decode_image(&t.path_a)?;
        let after = decode_image(&t.path_aprime)?;
        let query = decode_image(&t.path_b)?;
        let edited = decode_image(&bprime_path)?;
        rows.push(score_triplet(&encoders, &t.id, &before, &after, &query, &edited)?);
    }

    if rows.is_empty() {
        return Err(CliError::MissingArtifact {
            path: run_dir.join(artifact::SCORES_FILE),
            hint: "no scorable triplets in this run (all diverged or none generated)".into(),
        });
    }

    let report = DirectionalScoreReport::from_rows(rows, &encoders)?;
    report.write_csv(&run_dir.join(artifact::SCORES_FILE))?;
    report.write_summary_json(&run_dir.join(SCORES_SUMMARY_FILE))?;
    println!("{}", report.formatted_table());
    if skipped_diverged > 0 {
        println!("skipped {skipped_diverged} diverged triplet(s)");
    }
    Ok(report)
}
