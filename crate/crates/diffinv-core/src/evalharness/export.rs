//! Evaluation-document export: image grids for pairwise judging and
//! multiple-choice surveys, with recorded randomization for later
//! de-randomization, plus a minimal judge-client hook.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CELL_PAD: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const BLANK: Rgb<u8> = Rgb([0, 0, 0]);

/// Tile images into a `rows x cols` grid; `None` cells render as black
/// placeholders. All images must share one size.
pub fn compose_grid(
    cells: &[Option<&RgbImage>],
    rows: usize,
    cols: usize,
) -> Result<RgbImage> {
    if cells.len() != rows * cols {
        return Err(Error::InvalidConfig(format!(
            "grid wants {rows}x{cols} = {} cells, got {}",
            rows * cols,
            cells.len()
        )));
    }
    let first = cells
        .iter()
        .flatten()
        .next()
        .ok_or(Error::EmptyInput { what: "grid cells" })?;
    let (w, h) = first.dimensions();
    for img in cells.iter().flatten() {
        if img.dimensions() != (w, h) {
            return Err(Error::InvalidConfig(format!(
                "grid cells must share one size; got {:?} and {:?}",
                (w, h),
                img.dimensions()
            )));
        }
    }
    let total_w = cols as u32 * (w + CELL_PAD) + CELL_PAD;
    let total_h = rows as u32 * (h + CELL_PAD) + CELL_PAD;
    let mut grid = RgbImage::from_pixel(total_w, total_h, BACKGROUND);
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let x0 = CELL_PAD + c as u32 * (w + CELL_PAD);
        let y0 = CELL_PAD + r as u32 * (h + CELL_PAD);
        for y in 0..h {
            for x in 0..w {
                let px = match cell {
                    Some(img) => *img.get_pixel(x, y),
                    None => BLANK,
                };
                grid.put_pixel(x0 + x, y0 + y, px);
            }
        }
    }
    Ok(grid)
}

/// Pixel origin of a grid cell, for locating tiles in tests and tools.
pub fn grid_cell_origin(cell_w: u32, cell_h: u32, row: usize, col: usize) -> (u32, u32) {
    (
        CELL_PAD + col as u32 * (cell_w + CELL_PAD),
        CELL_PAD + row as u32 * (cell_h + CELL_PAD),
    )
}

/// Recorded layout of a pairwise evaluation document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VlmPairwiseManifest {
    pub triplet_id: String,
    pub grid: String,
    /// Candidate name shown as option X (bottom-left cell).
    pub option_x: String,
    /// Candidate name shown as option Y (bottom-middle cell).
    pub option_y: String,
}

/// Paths and ordering of one exported pairwise document.
#[derive(Debug, Clone)]
pub struct VlmPairwiseExport {
    pub grid_path: PathBuf,
    pub prompt_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: VlmPairwiseManifest,
}

/// Export a two-option evaluation document: a 2x3 grid (top row: before,
/// after, query; bottom row: the two candidates in randomized order) plus a
/// self-contained prompt text and a manifest recording the permutation.
pub fn export_vlm_pairwise_prompt(
    dir: &Path,
    triplet_id: &str,
    before: &RgbImage,
    after: &RgbImage,
    query: &RgbImage,
    candidates: [(&str, &RgbImage); 2],
    rng: &mut impl Rng,
) -> Result<VlmPairwiseExport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order = [0usize, 1usize];
    order.shuffle(rng);
    let (name_x, img_x) = candidates[order[0]];
    let (name_y, img_y) = candidates[order[1]];

    let grid = compose_grid(
        &[
            Some(before),
            Some(after),
            Some(query),
            Some(img_x),
            Some(img_y),
            None,
        ],
        2,
        3,
    )?;
    let grid_path = dir.join("vlm_grid.png");
    grid.save(&grid_path).map_err(|e| {
        Error::InvalidConfig(format!("failed to write {}: {e}", grid_path.display()))
    })?;

    let prompt_path = dir.join("vlm_prompt.txt");
    let prompt_text = format!(
        "You are shown a 2x3 image grid.\n\
         Top row, left to right: image A, image A' (A after an edit), and a new image B.\n\
         Bottom row: option X (left) and option Y (middle); the last cell is blank.\n\
         The same edit that turns A into A' should turn B into the correct answer.\n\
         Which option completes the analogy A : A' :: B : ? better?\n\
         Reply with exactly one letter: X or Y.\n"
    );
    std::fs::write(&prompt_path, prompt_text).map_err(|e| Error::io(&prompt_path, e))?;

    let manifest = VlmPairwiseManifest {
        triplet_id: triplet_id.to_string(),
        grid: "vlm_grid.png".to_string(),
        option_x: name_x.to_string(),
        option_y: name_y.to_string(),
    };
    let manifest_path = dir.join("vlm_manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidConfig(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(VlmPairwiseExport { grid_path, prompt_path, manifest_path, manifest })
}

/// One survey item: the reference pair, the query, and four candidates.
pub struct SurveyItem<'a> {
    pub triplet_id: String,
    pub before: &'a RgbImage,
    pub after: &'a RgbImage,
    pub query: &'a RgbImage,
    pub candidates: [(&'a str, &'a RgbImage); 4],
}

/// Answer-key entry: candidate names in displayed (shuffled) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveyKeyEntry {
    pub triplet_id: String,
    pub grid: String,
    /// Names of the candidates in the bottom row, left to right.
    pub displayed_order: Vec<String>,
}

/// Export four-option survey grids (2x4: top row before/after/query/blank,
/// bottom row the shuffled candidates) plus one answer-key file. The
/// shuffle is reproducible from the seed.
pub fn export_human_survey(
    dir: &Path,
    items: &[SurveyItem<'_>],
    rng: &mut impl Rng,
) -> Result<Vec<SurveyKeyEntry>> {
    if items.is_empty() {
        return Err(Error::EmptyInput { what: "survey items" });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut key = Vec::with_capacity(items.len());
    for item in items {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        let shuffled: Vec<(&str, &RgbImage)> =
            order.iter().map(|&i| item.candidates[i]).collect();
        let grid = compose_grid(
            &[
                Some(item.before),
                Some(item.after),
                Some(item.query),
                None,
                Some(shuffled[0].1),
                Some(shuffled[1].1),
                Some(shuffled[2].1),
                Some(shuffled[3].1),
            ],
            2,
            4,
        )?;
        let grid_name = format!("{}_survey.png", item.triplet_id);
        let grid_path = dir.join(&grid_name);
        grid.save(&grid_path).map_err(|e| {
            Error::InvalidConfig(format!("failed to write {}: {e}", grid_path.display()))
        })?;
        key.push(SurveyKeyEntry {
            triplet_id: item.triplet_id.clone(),
            grid: grid_name,
            displayed_order: shuffled.iter().map(|(n, _)| n.to_string()).collect(),
        });
    }
    let key_path = dir.join("survey_key.json");
    let body = serde_json::to_string_pretty(&key)
        .map_err(|e| Error::InvalidConfig(format!("key serialization failed: {e}")))?;
    std::fs::write(&key_path, body).map_err(|e| Error::io(&key_path, e))?;
    Ok(key)
}

/// A pairwise judge's verdict on an evaluation document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairwiseChoice {
    OptionX,
    OptionY,
}

/// Anything that can answer one pairwise evaluation document — a wrapper
/// around a vision-language model endpoint, a human console, or a stub.
pub trait JudgeClient {
    fn choose(&self, prompt_text: &str, grid: &RgbImage) -> Result<PairwiseChoice>;
}

/// Run a judge on an exported document and de-randomize its verdict back to
/// the winning candidate's name.
pub fn judge_pairwise(client: &dyn JudgeClient, export: &VlmPairwiseExport) -> Result<String> {
    let prompt = std::fs::read_to_string(&export.prompt_path)
        .map_err(|e| Error::io(&export.prompt_path, e))?;
    let grid = image::open(&export.grid_path)
        .map_err(|e| Error::ImageDecode { path: export.grid_path.clone(), source: e })?
        .to_rgb8();
    Ok(match client.choose(&prompt, &grid)? {
        PairwiseChoice::OptionX => export.manifest.option_x.clone(),
        PairwiseChoice::OptionY => export.manifest.option_y.clone(),
    })
}
