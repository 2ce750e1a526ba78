//! Compose the run's summary grid: one row per triplet, columns
//! A | A′ | B | B′.

use std::path::{Path, PathBuf};

use image::RgbImage;

use diffinv_core::artifact;
use diffinv_core::evalharness::export::compose_grid;

use crate::config::RunConfig;
use crate::dataset::decode_image;
use crate::error::{CliError, Result};
use crate::fixtures::save_png;

use super::{gate_read, read_triplets_json, SUMMARY_GRID_FILE};

/// Build `<run_dir>/summary_grid.png` from every triplet that has a
/// generated image. Returns the grid path.
pub fn grid_run(
    cfg: &RunConfig,
    run_dir_override: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    let canonical = cfg.canonical_toml()?;
    let run_dir: PathBuf = match run_dir_override {
        Some(d) => d.to_path_buf(),
        None => cfg.run_dir()?,
    };
    gate_read(&run_dir, &canonical, force)?;

    let sample = read_triplets_json(&run_dir)?;
    let mut row_images: Vec<[RgbImage; 4]> = Vec::new();
    for t in &sample.triplets {
        let bprime_path = run_dir.join(&t.id).join(artifact::EDITED_IMAGE_FILE);
        if !bprime_path.exists() {
            continue;
        }
        row_images.push([
            decode_image(&t.path_a)?,
            decode_image(&t.path_aprime)?,
            decode_image(&t.path_b)?,
            decode_image(&bprime_path)?,
        ]);
    }
    if row_images.is_empty() {
        return Err(CliError::MissingArtifact {
            path: run_dir.join(SUMMARY_GRID_FILE),
            hint: "no generated images to lay out; run `diffinv run` first".into(),
        });
    }

    // Generated images can come back at a different resolution than the
    // dataset images (backends decode at their native size), so cells are
    // upscaled to one display size before composition.
    let cell_w = row_images.iter().flatten().map(|i| i.width()).max().expect("nonempty");
    let cell_h = row_images.iter().flatten().map(|i| i.height()).max().expect("nonempty");
    for row in &mut row_images {
        for img in row.iter_mut() {
            if img.width() != cell_w || img.height() != cell_h {
                *img = image::imageops::resize(
                    img,
                    cell_w,
                    cell_h,
                    image::imageops::FilterType::Nearest,
                );
            }
        }
    }

    let cells: Vec<Option<&RgbImage>> =
        row_images.iter().flat_map(|row| row.iter().map(Some)).collect();
    let grid = compose_grid(&cells, row_images.len(), 4)?;
    let path = run_dir.join(SUMMARY_GRID_FILE);
    save_png(&grid, &path)?;
    println!("wrote {}", path.display());
    Ok(path)
}
