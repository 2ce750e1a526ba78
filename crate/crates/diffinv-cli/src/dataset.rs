//! Dataset ingestion and triplet sampling.
//!
//! A dataset is one JSON-lines manifest, one edit pair per line:
//! `{"id": ..., "before": ..., "after": ..., "instruction": ...}` with paths
//! resolved relative to the manifest's directory. Triplets pair one edit
//! pair (A, A′) with a query image B drawn from another pair sharing the
//! identical instruction string. The instruction itself is bookkeeping only:
//! the model-facing view of a triplet carries no instruction field at all.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One manifest line: an edit pair and the instruction that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub before: PathBuf,
    pub after: PathBuf,
    pub instruction: String,
}

/// Read a JSON-lines manifest; blank lines are ignored, paths become
/// absolute-or-manifest-relative, and duplicate ids are rejected.
pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read dataset manifest {}: {e}", path.display()))
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: PairRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!(
                "bad manifest record at {}:{}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CliError::Config(format!(
                "duplicate pair id '{}' in {}",
                record.id,
                path.display()
            )));
        }
        record.before = resolve(base, &record.before);
        record.after = resolve(base, &record.after);
        records.push(record);
    }
    Ok(records)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

/// One sampled analogy task: edit pair (A, A′), query image B, optional
/// ground-truth B′, and the instruction kept for reports only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub path_a: PathBuf,
    pub path_aprime: PathBuf,
    pub path_b: PathBuf,
    /// The edited counterpart of B from the pair it was drawn from.
    pub path_b_gt: Option<PathBuf>,
    /// Never fed to any model input; reports and sampling bookkeeping only.
    pub instruction_text: Option<String>,
}

/// The images a triplet puts in front of the model. Deliberately carries no
/// instruction field: redaction is structural, not a runtime check.
#[derive(Debug, Clone)]
pub struct ModelTriplet {
    pub id: String,
    pub before: RgbImage,
    pub after: RgbImage,
    pub query: RgbImage,
}

pub(crate) fn decode_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| diffinv_core::Error::ImageDecode { path: path.to_path_buf(), source: e })?;
    Ok(img.to_rgb8())
}

impl TripletRecord {
    /// Decode every referenced image, proving they exist and parse.
    pub fn validate_images(&self) -> Result<()> {
        decode_image(&self.path_a)?;
        decode_image(&self.path_aprime)?;
        decode_image(&self.path_b)?;
        if let Some(gt) = &self.path_b_gt {
            decode_image(gt)?;
        }
        Ok(())
    }

    /// Load the three model-facing images.
    pub fn load_model_view(&self) -> Result<ModelTriplet> {
        Ok(ModelTriplet {
            id: self.id.clone(),
            before: decode_image(&self.path_a)?,
            after: decode_image(&self.path_aprime)?,
            query: decode_image(&self.path_b)?,
        })
    }
}

/// A triplet sample plus the bookkeeping the summary reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub triplets: Vec<TripletRecord>,
    /// Pairs whose instruction no other pair shares; no valid B exists.
    pub skipped_singleton_pairs: usize,
    pub requested: usize,
    /// The request exceeded the eligible pairs, so all of them were taken.
    pub truncated: bool,
}

/// Sample `count` triplets from edit pairs, seeded and reproducible.
///
/// Pairs are grouped by exact instruction string. Eligible pairs (group size
/// at least two) are shuffled once with a ChaCha8 generator seeded by
/// `seed`; the first `count` survivors each draw a partner uniformly from
/// the rest of their group, in shuffle order, from the same generator. B is
/// the partner's before image and the partner's after image becomes the
/// ground-truth B′.
pub fn sample_triplets(records: &[PairRecord], count: usize, seed: u64) -> Result<SampleSummary> {
    if records.is_empty() {
        return Err(CliError::Config("dataset manifest contains no pairs".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.instruction.as_str()).or_default().push(i);
    }
    let eligible: Vec<usize> = (0..records.len())
        .filter(|&i| groups[records[i].instruction.as_str()].len() >= 2)
        .collect();
    let skipped = records.len() - eligible.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = eligible;
    order.shuffle(&mut rng);
    let taken = count.min(order.len());
    let truncated = count > order.len();

    let mut triplets = Vec::with_capacity(taken);
    for &i in &order[..taken] {
        let a = &records[i];
        let partners: Vec<usize> = groups[a.instruction.as_str()]
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        let b = &records[partners[rng.random_range(0..partners.len())]];
        triplets.push(TripletRecord {
            id: format!("{}__{}", a.id, b.id),
            path_a: a.before.clone(),
            path_aprime: a.after.clone(),
            path_b: b.before.clone(),
            path_b_gt: Some(b.after.clone()),
            instruction_text: Some(a.instruction.clone()),
        });
    }
    Ok(SampleSummary { triplets, skipped_singleton_pairs: skipped, requested: count, truncated })
}

/// Read a manifest, sample triplets, and decode every sampled image so bad
/// paths fail at ingestion rather than mid-run.
pub fn sample_from_manifest(manifest: &Path, count: usize, seed: u64) -> Result<SampleSummary> {
    let records = read_manifest(manifest)?;
    let summary = sample_triplets(&records, count, seed)?;
    for t in &summary.triplets {
        t.validate_images()?;
    }
    Ok(summary)
}
