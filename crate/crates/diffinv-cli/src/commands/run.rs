//! Batch orchestration: sample triplets, then invert, generate, and score
//! them in a worker pool. Also serves the single-stage `invert` and
//! `generate` commands, which are the same loop with stages switched off.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;

use diffinv_core::backends::CallCounts;
use diffinv_core::backends::registry::EvalEncoders;
use diffinv_core::evalharness::{DirectionalScoreReport, ScoredTriplet};
use diffinv_core::{artifact, eval_encoders, score_triplet};

use crate::cache::{ArtifactCache, CacheStats, cache_root};
use crate::config::RunConfig;
use crate::dataset::{SampleSummary, TripletRecord, decode_image, sample_from_manifest};
use crate::error::{CliError, Result};

use super::generate::{GenerateStatus, generate_triplet};
use super::invert::{InvertStatus, invert_triplet};
use super::{
    BundleSlot, Snapshot, diverged_marker, read_triplets_json, snapshot_state, write_snapshot,
    write_triplets_json, RUN_SUMMARY_FILE, SCORES_SUMMARY_FILE, TRIPLETS_FILE,
};

/// Which stages a batch execution performs.
#[derive(Debug, Clone, Copy)]
pub struct Stages {
    pub invert: bool,
    pub generate: bool,
    pub score: bool,
}

impl Stages {
    pub const ALL: Stages = Stages { invert: true, generate: true, score: true };
    pub const INVERT_ONLY: Stages = Stages { invert: true, generate: false, score: false };
    pub const GENERATE_ONLY: Stages = Stages { invert: false, generate: true, score: false };
}

/// Backend call totals summed over all workers' bundles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BackendCallTotals {
    pub encode_image: u64,
    pub encode_text: u64,
    pub caption: u64,
    pub encode_latent: u64,
    pub decode_latent: u64,
    pub add_noise: u64,
    pub predict_noise: u64,
    pub sample: u64,
}

impl BackendCallTotals {
    fn add(&mut self, c: &CallCounts) {
        self.encode_image += c.encode_image;
        self.encode_text += c.encode_text;
        self.caption += c.caption;
        self.encode_latent += c.encode_latent;
        self.decode_latent += c.decode_latent;
        self.add_noise += c.add_noise;
        self.predict_noise += c.predict_noise;
        self.sample += c.sample;
    }

    pub fn total(&self) -> u64 {
        self.encode_image
            + self.encode_text
            + self.caption
            + self.encode_latent
            + self.decode_latent
            + self.add_noise
            + self.predict_noise
            + self.sample
    }
}

/// Execution record written to `run_summary.json`. Contains no timestamps
/// or durations: identical runs must produce identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub triplet_count: usize,
    pub skipped_singleton_pairs: usize,
    pub sample_truncated: bool,
    pub diverged: Vec<String>,
    pub fallback_img2img: Vec<String>,
    pub resumed_inversions: usize,
    pub resumed_generations: usize,
    pub backend_calls: BackendCallTotals,
    pub cache: CacheStats,
}

/// Everything a batch run produced, for callers and tests.
#[derive(Debug)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub scores: Option<DirectionalScoreReport>,
}

#[derive(Debug, Default)]
struct TripletOutput {
    invert: Option<InvertStatus>,
    generate: Option<GenerateStatus>,
    score: Option<ScoredTriplet>,
}

/// Run the selected stages over the sampled triplets.
pub fn run_batch(cfg: &RunConfig, stages: Stages, force: bool, reverse: bool) -> Result<RunReport> {
    cfg.validate()?;
    super::check_anchor_mode(cfg)?;
    let canonical = cfg.canonical_toml()?;
    let run_dir = cfg.run_dir()?;
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::io(run_dir.clone(), e))?;

    let state = snapshot_state(&run_dir, &canonical)?;
    if state == Snapshot::Mismatch && !force {
        return Err(CliError::SnapshotMismatch {
            path: run_dir.join(artifact::CONFIG_SNAPSHOT_FILE),
        });
    }

    // Reuse a stored triplet list only when it belongs to this config;
    // otherwise sample afresh (deterministic in manifest, count, and seed).
    let summary_sample: SampleSummary =
        if state == Snapshot::Match && run_dir.join(TRIPLETS_FILE).exists() {
            read_triplets_json(&run_dir)?
        } else {
            let manifest = cfg.dataset_path()?;
            let s = sample_from_manifest(manifest, cfg.eval.count, cfg.optim.seed)?;
            write_triplets_json(&run_dir, &s)?;
            s
        };
    write_snapshot(&run_dir, &canonical)?;

    if summary_sample.truncated {
        eprintln!(
            "warning: requested {} triplets but only {} eligible pair(s); using all of them",
            summary_sample.requested,
            summary_sample.triplets.len()
        );
    }

    let triplets = &summary_sample.triplets;
    let jobs = cfg.eval.jobs.max(1).min(triplets.len().max(1));
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..triplets.len()).collect());
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<TripletOutput>>> =
        Mutex::new((0..triplets.len()).map(|_| None).collect());
    let failures: Mutex<Vec<CliError>> = Mutex::new(Vec::new());
    let totals: Mutex<(BackendCallTotals, CacheStats)> = Mutex::new(Default::default());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| {
                match worker(
                    cfg, &canonical, &run_dir, triplets, stages, force, reverse, &queue, &abort,
                    &results,
                ) {
                    Ok((counts, stats)) => {
                        let mut t = totals.lock().expect("totals lock");
                        if let Some(c) = counts {
                            t.0.add(&c);
                        }
                        t.1.add(&stats);
                    }
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        failures.lock().expect("failures lock").push(e);
                    }
                }
            });
        }
    });

    if let Some(e) = failures.into_inner().expect("failures lock").into_iter().next() {
        return Err(e);
    }

    let results = results.into_inner().expect("results lock");
    let (backend_calls, cache_stats) = totals.into_inner().expect("totals lock");

    let mut diverged = Vec::new();
    let mut fallback = Vec::new();
    let mut resumed_inversions = 0;
    let mut resumed_generations = 0;
    let mut rows = Vec::new();
    for out in results.into_iter().flatten() {
        if let Some(inv) = &out.invert {
            if inv.resumed {
                resumed_inversions += 1;
            }
            if inv.diverged {
                diverged.push(inv.triplet_id.clone());
            }
        }
        if let Some(g) = &out.generate {
            if g.resumed {
                resumed_generations += 1;
            }
            if g.fallback_img2img {
                fallback.push(g.triplet_id.clone());
            }
        }
        if let Some(row) = out.score {
            rows.push(row);
        }
    }

    let scores = if stages.score && !rows.is_empty() {
        let encoders = eval_encoders(&cfg.backend, cfg.eval.dino)?;
        let report = DirectionalScoreReport::from_rows(rows, &encoders)?;
        report.write_csv(&run_dir.join(artifact::SCORES_FILE))?;
        report.write_summary_json(&run_dir.join(SCORES_SUMMARY_FILE))?;
        println!("{}", report.formatted_table());
        Some(report)
    } else {
        None
    };

    let summary = RunSummary {
        run_id: cfg.run_id()?,
        config_hash: cfg.config_hash()?,
        triplet_count: triplets.len(),
        skipped_singleton_pairs: summary_sample.skipped_singleton_pairs,
        sample_truncated: summary_sample.truncated,
        diverged: diverged.clone(),
        fallback_img2img: fallback,
        resumed_inversions,
        resumed_generations,
        backend_calls,
        cache: cache_stats,
    };
    let summary_path = run_dir.join(RUN_SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("cannot serialize run summary: {e}")))?;
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(|e| CliError::io(summary_path, e))?;

    println!(
        "run {} complete: {} triplet(s), {} skipped singleton pair(s), {} backend call(s)",
        summary.run_id,
        summary.triplet_count,
        summary.skipped_singleton_pairs,
        summary.backend_calls.total(),
    );

    if !diverged.is_empty() {
        return Err(CliError::Diverged { ids: diverged });
    }
    Ok(RunReport { run_dir, summary, scores })
}

#[allow(clippy::too_many_arguments)]
fn worker(
    cfg: &RunConfig,
    canonical: &str,
    run_dir: &Path,
    triplets: &[TripletRecord],
    stages: Stages,
    force: bool,
    reverse: bool,
    queue: &Mutex<VecDeque<usize>>,
    abort: &AtomicBool,
    results: &Mutex<Vec<Option<TripletOutput>>>,
) -> Result<(Option<CallCounts>, CacheStats)> {
    let mut slot = BundleSlot::new(cfg);
    let mut cache = ArtifactCache::open(&cache_root(cfg))?;
    let mut encoders: Option<EvalEncoders> = None;

    let mut failure = None;
    loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let next = queue.lock().expect("queue lock").pop_front();
        let Some(idx) = next else { break };
        match process_one(
            cfg, canonical, run_dir, &triplets[idx], stages, force, reverse, &mut slot,
            &mut cache, &mut encoders,
        ) {
            Ok(out) => results.lock().expect("results lock")[idx] = Some(out),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    let stats = cache.stats();
    let counts = slot.finish()?;
    match failure {
        Some(e) => Err(e),
        None => Ok((counts, stats)),
    }
}

#[allow(clippy::too_many_arguments)]
fn process_one(
    cfg: &RunConfig,
    canonical: &str,
    run_dir: &Path,
    triplet: &TripletRecord,
    stages: Stages,
    force: bool,
    reverse: bool,
    slot: &mut BundleSlot<'_>,
    cache: &mut ArtifactCache,
    encoders: &mut Option<EvalEncoders>,
) -> Result<TripletOutput> {
    let mut out = TripletOutput::default();
    let tdir = run_dir.join(&triplet.id);

    if stages.invert {
        let status = invert_triplet(cfg, canonical, run_dir, triplet, slot, cache, force)?;
        let diverged = status.diverged;
        out.invert = Some(status);
        if diverged {
            return Ok(out);
        }
    }

    if stages.generate {
        // A standalone generate pass skips triplets whose inversion is
        // recorded as diverged instead of failing the whole batch.
        if !stages.invert && diverged_marker(&tdir).is_some() {
            return Ok(out);
        }
        out.generate =
            Some(generate_triplet(cfg, canonical, run_dir, triplet, slot, cache, force, reverse)?);
    }

    if stages.score {
        let bprime_path = tdir.join(artifact::EDITED_IMAGE_FILE);
        if bprime_path.exists() {
            if encoders.is_none() {
                *encoders = Some(eval_encoders(&cfg.backend, cfg.eval.dino)?);
            }
            let enc = encoders.as_ref().expect("just built");
            let before = decode_image(&triplet.path_a)?;
            let after = decode_image(&triplet.path_aprime)?;
            let query = decode_image(&triplet.path_b)?;
            let edited = decode_image(&bprime_path)?;
            let row = score_triplet(enc, &triplet.id, &before, &after, &query, &edited)?;
            let csv_path = tdir.join(artifact::SCORES_FILE);
            let csv = format!("{}\n{}\n", ScoredTriplet::CSV_HEADER, row.csv_row());
            std::fs::write(&csv_path, csv).map_err(|e| CliError::io(csv_path, e))?;
            out.score = Some(row);
        }
    }

    Ok(out)
}
