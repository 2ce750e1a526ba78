//! Directional-score evaluation and evaluation-document export.
//!
//! The directional score of an edited query against a reference pair is the
//! cosine between the two embedding-space movement vectors: how closely
//! B → B′ tracks A → A′ under a given image encoder. Reports aggregate the
//! score under a semantic encoder (CLIP role) and optionally a
//! structure-oriented one (DINO role).

pub mod export;

use std::io::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::Serialize;

use crate::backends::ImageEncoder;
use crate::backends::registry::EvalEncoders;
use crate::embedding::cosine_similarity_arrays;
use crate::error::{Error, Result};
use crate::limits::DEGENERATE_NORM_EPS;

/// One directional-score evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalScore {
    pub value: f64,
    /// One of the two movement vectors was numerically zero, so the cosine
    /// is undefined and the value was pinned to 0.
    pub degenerate: bool,
}

/// Cosine between the `before → after` and `query → edited` embedding
/// movements under one encoder.
pub fn directional_score(
    encoder: &dyn ImageEncoder,
    before: &RgbImage,
    after: &RgbImage,
    query: &RgbImage,
    edited: &RgbImage,
) -> Result<DirectionalScore> {
    let ref_dir = &encoder.encode_image(after)?.values - &encoder.encode_image(before)?.values;
    let out_dir = &encoder.encode_image(edited)?.values - &encoder.encode_image(query)?.values;
    let ref_norm = ref_dir.dot(&ref_dir).sqrt();
    let out_norm = out_dir.dot(&out_dir).sqrt();
    if ref_norm < DEGENERATE_NORM_EPS || out_norm < DEGENERATE_NORM_EPS {
        return Ok(DirectionalScore { value: 0.0, degenerate: true });
    }
    Ok(DirectionalScore { value: cosine_similarity_arrays(&ref_dir, &out_dir), degenerate: false })
}

/// Scores of one triplet under the configured encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub triplet_id: String,
    pub clip_score: f64,
    pub dino_score: Option<f64>,
    pub clip_degenerate: bool,
    pub dino_degenerate: bool,
}

impl ScoredTriplet {
    pub const CSV_HEADER: &'static str = "triplet_id,clip_score,dino_score";

    pub fn csv_row(&self) -> String {
        match self.dino_score {
            Some(d) => format!("{},{},{}", self.triplet_id, self.clip_score, d),
            None => format!("{},{},", self.triplet_id, self.clip_score),
        }
    }
}

/// Score one triplet under both eval encoders.
pub fn score_triplet(
    encoders: &EvalEncoders,
    triplet_id: &str,
    before: &RgbImage,
    after: &RgbImage,
    query: &RgbImage,
    edited: &RgbImage,
) -> Result<ScoredTriplet> {
    let clip = directional_score(encoders.clip.as_ref(), before, after, query, edited)?;
    let (dino_score, dino_degenerate) = match &encoders.dino {
        Some(enc) => {
            let s = directional_score(enc.as_ref(), before, after, query, edited)?;
            (Some(s.value), s.degenerate)
        }
        None => (None, false),
    };
    Ok(ScoredTriplet {
        triplet_id: triplet_id.to_string(),
        clip_score: clip.value,
        dino_score,
        clip_degenerate: clip.degenerate,
        dino_degenerate,
    })
}

/// Aggregated directional scores for a batch of triplets.
#[derive(Debug, Clone)]
pub struct DirectionalScoreReport {
    pub rows: Vec<ScoredTriplet>,
    pub mean_clip: f64,
    pub mean_dino: Option<f64>,
    pub clip_encoder_id: String,
    pub dino_encoder_id: Option<String>,
}

/// The JSON summary written next to the CSV.
#[derive(Debug, Serialize)]
struct ReportSummary<'a> {
    count: usize,
    mean_clip: f64,
    mean_dino: Option<f64>,
    clip_encoder_id: &'a str,
    dino_encoder_id: Option<&'a str>,
    clip_degenerate_count: usize,
    dino_degenerate_count: usize,
}

impl DirectionalScoreReport {
    /// Aggregate per-triplet rows; at least one row is required for the
    /// means to be defined.
    pub fn from_rows(rows: Vec<ScoredTriplet>, encoders: &EvalEncoders) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { what: "scored triplets" });
        }
        let n = rows.len() as f64;
        let mean_clip = rows.iter().map(|r| r.clip_score).sum::<f64>() / n;
        let mean_dino = if rows.iter().all(|r| r.dino_score.is_some()) {
            Some(rows.iter().map(|r| r.dino_score.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        Ok(DirectionalScoreReport {
            rows,
            mean_clip,
            mean_dino,
            clip_encoder_id: encoders.clip_id.clone(),
            dino_encoder_id: encoders.dino_id.clone(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", ScoredTriplet::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            writeln!(file, "{}", row.csv_row()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let summary = ReportSummary {
            count: self.rows.len(),
            mean_clip: self.mean_clip,
            mean_dino: self.mean_dino,
            clip_encoder_id: &self.clip_encoder_id,
            dino_encoder_id: self.dino_encoder_id.as_deref(),
            clip_degenerate_count: self.rows.iter().filter(|r| r.clip_degenerate).count(),
            dino_degenerate_count: self.rows.iter().filter(|r| r.dino_degenerate).count(),
        };
        let body = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::InvalidConfig(format!("summary serialization failed: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// A fixed-width text table for terminal output.
    pub fn formatted_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>12} {:>12}\n", "triplet_id", "clip", "dino"));
        for row in &self.rows {
            let dino = row
                .dino_score
                .map(|d| format!("{d:>12.4}"))
                .unwrap_or_else(|| format!("{:>12}", "-"));
            out.push_str(&format!("{:<24} {:>12.4} {}\n", row.triplet_id, row.clip_score, dino));
        }
        let dino_mean = self
            .mean_dino
            .map(|d| format!("{d:>12.4}"))
            .unwrap_or_else(|| format!("{:>12}", "-"));
        out.push_str(&format!("{:<24} {:>12.4} {}\n", "mean", self.mean_clip, dino_mean));
        out
    }
}
