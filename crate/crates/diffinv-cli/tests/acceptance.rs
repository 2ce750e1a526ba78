//! The acceptance gate: one integration test per shipped guarantee, each
//! printing a single `acceptance NN <name>: PASS` line on success (run with
//! `-- --nocapture` to see them). Every tolerance and runtime budget is a
//! named constant next to the test that uses it, not a magic number.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffinv_cli::commands::TEXT_AUDIT_ENV;
use diffinv_cli::commands::run::{Stages, run_batch};
use diffinv_cli::config::RunConfig;
use diffinv_cli::dataset::{PairRecord, sample_triplets};
use diffinv_cli::fixtures::write_demo_dataset;

use diffinv_core::anchoring::{HardPromptSettings, caption_prompt, hard_prompt_invert};
use diffinv_core::artifact;
use diffinv_core::backends::BackendBundle;
use diffinv_core::backends::mock::{MockBundleBuilder, MockDims, MockImageEncoder};
use diffinv_core::config::{AnchorConfig, AnchorMode, ClipBridge, InversionConfig};
use diffinv_core::delta::{
    Delta, DeltaSource, cosine_alignment_loss, image_delta, slerp, text_delta,
};
use diffinv_core::embedding::{EmbeddingVector, cosine_similarity};
use diffinv_core::evalharness::directional_score;
use diffinv_core::inversion::loss::{
    LossContext, NoiseDraws, alignment_loss, consistency_loss, total_loss, total_loss_with_grad,
};
use diffinv_core::inversion::{DiffTokens, InversionInputs, optimize};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
}

/// Draw until the vector is comfortably away from zero, then unit-normalize.
fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = random_vector(rng, dim);
        let n = v.dot(&v).sqrt();
        if n > 1e-3 {
            return v / n;
        }
    }
}

fn delta_of(values: Array1<f64>, source: DeltaSource) -> Delta {
    Delta {
        direction: EmbeddingVector::new(values),
        source,
        degenerate: false,
        lerp_fallback: false,
    }
}

/// Everything one combined-loss evaluation needs, owned in one place.
struct LossFixture {
    bundle: BackendBundle,
    anchor_before: Array2<f64>,
    anchor_after: Array2<f64>,
    z_before: diffinv_core::Latent,
    z_after: diffinv_core::Latent,
    target: Delta,
}

fn loss_fixture(bundle_seed: u64, image_seed: u64) -> LossFixture {
    let bundle = MockBundleBuilder::new(bundle_seed).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let img_before = random_image(&mut rng);
    let img_after = random_image(&mut rng);
    let anchor_before = caption_prompt(&bundle, &img_before, "fx_a", None).unwrap();
    let anchor_after = caption_prompt(&bundle, &img_after, "fx_ap", None).unwrap();
    let d_img = image_delta(
        &bundle.encode_image(&img_after).unwrap(),
        &bundle.encode_image(&img_before).unwrap(),
    )
    .unwrap();
    let d_txt = text_delta(
        &bundle.encode_text(&anchor_after.text).unwrap(),
        &bundle.encode_text(&anchor_before.text).unwrap(),
    )
    .unwrap();
    let target = slerp(&d_img, &d_txt, 0.8).unwrap();
    LossFixture {
        z_before: bundle.encode_latent(&img_before).unwrap(),
        z_after: bundle.encode_latent(&img_after).unwrap(),
        anchor_before: anchor_before.embeddings,
        anchor_after: anchor_after.embeddings,
        target,
        bundle,
    }
}

fn context<'a>(f: &'a LossFixture, lambda_tc: f64, lambda_clip: f64) -> LossContext<'a> {
    LossContext {
        anchor_before: &f.anchor_before,
        anchor_after: &f.anchor_after,
        z_before: &f.z_before,
        z_after: &f.z_after,
        target: &f.target,
        lambda_consistency: lambda_tc,
        lambda_alignment: lambda_clip,
        bridge: ClipBridge::Encode,
    }
}

/// Recursively collect every file under `root` as `relative path -> bytes`.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

// ---------------------------------------------------------------------------
// 01: spherical interpolation
// ---------------------------------------------------------------------------

const SLERP_PAIRS: usize = 1000;
const SLERP_DIM: usize = 8;
const SLERP_TOL: f64 = 1e-6;
const SLERP_CONTINUITY_STEP: f64 = 1e-6;
const SLERP_CONTINUITY_TOL: f64 = 1e-3;
const SLERP_BUDGET: Duration = Duration::from_secs(5);

#[test]
fn acceptance_01_spherical_interpolation_suite() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..SLERP_PAIRS {
        let u = random_unit(&mut rng, SLERP_DIM);
        let v = random_unit(&mut rng, SLERP_DIM);
        let d_img = delta_of(u.clone(), DeltaSource::Image);
        let d_txt = delta_of(v.clone(), DeltaSource::Text);

        // Endpoints return the inputs.
        let at0 = slerp(&d_img, &d_txt, 0.0).unwrap();
        let at1 = slerp(&d_img, &d_txt, 1.0).unwrap();
        for i in 0..SLERP_DIM {
            assert!(
                (at0.direction.values[i] - u[i]).abs() <= SLERP_TOL,
                "case {case}: endpoint 0 drifted at coordinate {i}"
            );
            assert!(
                (at1.direction.values[i] - v[i]).abs() <= SLERP_TOL,
                "case {case}: endpoint 1 drifted at coordinate {i}"
            );
        }

        // Unit inputs stay unit along the whole arc.
        let alpha: f64 = rng.random_range(0.0..0.999);
        let mid = slerp(&d_img, &d_txt, alpha).unwrap();
        if !mid.lerp_fallback {
            assert!(
                (mid.norm() - 1.0).abs() <= SLERP_TOL,
                "case {case}: norm {} at alpha {alpha}",
                mid.norm()
            );
        }

        // A vanishing step in alpha moves the result a vanishing amount.
        let next = slerp(&d_img, &d_txt, alpha + SLERP_CONTINUITY_STEP).unwrap();
        if !mid.lerp_fallback && !next.lerp_fallback {
            let step = (&next.direction.values - &mid.direction.values)
                .mapv(|x| x * x)
                .sum()
                .sqrt();
            assert!(
                step <= SLERP_CONTINUITY_TOL,
                "case {case}: jump of {step} across alpha step at {alpha}"
            );
        }

        // Orthonormal closed form: the halfway point of perpendicular unit
        // vectors is (sqrt(2)/2) * (u + w).
        let mut w = &v - &(v.dot(&u) * &u);
        let wn = w.dot(&w).sqrt();
        assert!(wn > 1e-6, "case {case}: orthogonalization collapsed");
        w /= wn;
        let d_w = delta_of(w.clone(), DeltaSource::Text);
        let half = slerp(&d_img, &d_w, 0.5).unwrap();
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..SLERP_DIM {
            let expected = scale * (u[i] + w[i]);
            assert!(
                (half.direction.values[i] - expected).abs() <= SLERP_TOL,
                "case {case}: orthonormal midpoint off at coordinate {i}"
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < SLERP_BUDGET, "interpolation suite took {elapsed:?}");
    println!("acceptance 01 spherical-interpolation-suite: PASS");
}

// ---------------------------------------------------------------------------
// 02: difference antisymmetry
// ---------------------------------------------------------------------------

const ANTISYMMETRY_PAIRS: usize = 1000;

#[test]
fn acceptance_02_difference_antisymmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..ANTISYMMETRY_PAIRS {
        let a = EmbeddingVector::new(random_vector(&mut rng, SLERP_DIM).mapv(|x| x * 1e3));
        let b = EmbeddingVector::new(random_vector(&mut rng, SLERP_DIM).mapv(|x| x * 1e3));
        let pairs = [
            (image_delta(&a, &b).unwrap(), image_delta(&b, &a).unwrap()),
            (text_delta(&a, &b).unwrap(), text_delta(&b, &a).unwrap()),
        ];
        for (fwd, bwd) in pairs {
            for i in 0..SLERP_DIM {
                // Bit-for-bit negation, which also pins the sign of zeros.
                assert_eq!(
                    fwd.direction.values[i].to_bits(),
                    (-bwd.direction.values[i]).to_bits(),
                    "case {case}: antisymmetry broke at coordinate {i}"
                );
            }
        }
    }
    println!("acceptance 02 difference-antisymmetry: PASS");
}

// ---------------------------------------------------------------------------
// 03: zero initialization and the neutral alignment convention
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_zero_initialization_and_neutral_alignment() {
    // Fresh difference tokens are an exactly-zero matrix: positive zero in
    // every slot, not merely small values.
    let tokens = DiffTokens::init(5, 8).unwrap();
    assert_eq!(tokens.embeddings.dim(), (5, 8));
    for &x in tokens.embeddings.iter() {
        assert_eq!(x.to_bits(), 0.0f64.to_bits());
    }

    // The alignment objective treats a zero representation as neutral: the
    // loss is exactly 1, with no error and no direction preference.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..100 {
        let target = delta_of(
            random_unit(&mut rng, SLERP_DIM),
            DeltaSource::Interpolated { alpha: 0.8 },
        );
        let loss = cosine_alignment_loss(&EmbeddingVector::zeros(SLERP_DIM), &target).unwrap();
        assert_eq!(loss.to_bits(), 1.0f64.to_bits());
    }
    println!("acceptance 03 zero-init-neutral-alignment: PASS");
}

// ---------------------------------------------------------------------------
// 04: analytic gradient against central finite differences
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
/// Per-coordinate denominator floor: coordinates whose probe is smaller
/// than this are compared on an absolute scale instead, which keeps the
/// relative check meaningful where the true gradient is essentially zero.
const FD_GUARD: f64 = 1e-4;
const FD_TOKENS: usize = 5;
const FD_WIDTH: usize = 8;
const FD_BUDGET: Duration = Duration::from_secs(30);

#[test]
fn acceptance_04_analytic_gradient_matches_finite_differences() {
    let started = Instant::now();
    let f = loss_fixture(7, 99);
    let ctx = context(&f, 0.01, 6.0);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let draws = NoiseDraws::sample(&mut rng, (0, f.bundle.t_max()), &f.bundle.latent_shape());

    let random_point =
        Array2::from_shape_fn((FD_TOKENS, FD_WIDTH), |_| rng.random_range(-0.5..0.5));
    let points = [Array2::zeros((FD_TOKENS, FD_WIDTH)), random_point];

    for (which, point) in points.iter().enumerate() {
        let (_, analytic) = total_loss_with_grad(&f.bundle, &ctx, point, &draws).unwrap();
        for r in 0..FD_TOKENS {
            for c in 0..FD_WIDTH {
                let mut plus = point.clone();
                plus[[r, c]] += FD_STEP;
                let mut minus = point.clone();
                minus[[r, c]] -= FD_STEP;
                let fd = (total_loss(&f.bundle, &ctx, &plus, &draws).unwrap().total
                    - total_loss(&f.bundle, &ctx, &minus, &draws).unwrap().total)
                    / (2.0 * FD_STEP);
                let rel = (analytic[[r, c]] - fd).abs() / fd.abs().max(FD_GUARD);
                assert!(
                    rel < FD_REL_TOL,
                    "point {which}, coordinate ({r},{c}): analytic {} vs probe {fd}, \
                     relative error {rel}",
                    analytic[[r, c]]
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < FD_BUDGET, "gradient check took {elapsed:?}");
    println!("acceptance 04 analytic-gradient-check: PASS");
}

// ---------------------------------------------------------------------------
// 05: recorded totals are the exact weighted sum, every row
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_trace_totals_are_exact_weighted_sums() {
    let bundle = MockBundleBuilder::new(0).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let a = random_image(&mut rng);
    let ap = random_image(&mut rng);
    let inputs = InversionInputs::new(&a, &ap, "t05_a", "t05_ap");

    // The stock configuration: weights 0.01 and 6, full iteration count.
    let cfg = InversionConfig::default();
    assert_eq!(cfg.lambda_tc, 0.01);
    assert_eq!(cfg.lambda_clip, 6.0);
    let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
    assert_eq!(out.trace.len(), cfg.iterations);
    for row in &out.trace {
        let recomputed = cfg.lambda_tc * row.consistency + cfg.lambda_clip * row.alignment;
        assert_eq!(
            row.total.to_bits(),
            recomputed.to_bits(),
            "iteration {}: stored total is not the exact weighted sum",
            row.iteration
        );
    }

    // The identity survives the round trip through the trace file.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(artifact::TRACE_FILE);
    artifact::write_trace(&path, &out.trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("iteration,l_tc,l_clip,l_total"));
    let parsed = artifact::read_trace(&path).unwrap();
    assert_eq!(parsed.len(), out.trace.len());
    for (row, original) in parsed.iter().zip(&out.trace) {
        assert_eq!(row.total.to_bits(), original.total.to_bits());
        let recomputed = cfg.lambda_tc * row.consistency + cfg.lambda_clip * row.alignment;
        assert_eq!(row.total.to_bits(), recomputed.to_bits());
    }
    println!("acceptance 05 trace-weighted-sum: PASS");
}

// ---------------------------------------------------------------------------
// 06: consistency loss role symmetry
// ---------------------------------------------------------------------------

const ROLE_SYMMETRY_DRAWS: usize = 10;
const ROLE_SYMMETRY_TOL: f64 = 1e-6;

#[test]
fn acceptance_06_consistency_loss_role_symmetry() {
    let f = loss_fixture(7, 606);
    let mut rng = ChaCha8Rng::seed_from_u64(607);
    for case in 0..ROLE_SYMMETRY_DRAWS {
        let tokens =
            Array2::from_shape_fn((3, FD_WIDTH), |_| rng.random_range(-0.5..0.5));
        let draws = NoiseDraws::sample(&mut rng, (0, f.bundle.t_max()), &f.bundle.latent_shape());
        let forward = consistency_loss(
            &f.bundle,
            &f.anchor_before,
            &f.anchor_after,
            &f.z_before,
            &f.z_after,
            &tokens,
            &draws,
        )
        .unwrap();
        // Exchange the pair roles, negate the tokens, mirror the draws.
        let swapped = consistency_loss(
            &f.bundle,
            &f.anchor_after,
            &f.anchor_before,
            &f.z_after,
            &f.z_before,
            &tokens.mapv(|x| -x),
            &draws.mirrored(),
        )
        .unwrap();
        assert!(
            (forward - swapped).abs() <= ROLE_SYMMETRY_TOL,
            "case {case}: {forward} vs {swapped}"
        );
    }
    println!("acceptance 06 role-symmetry: PASS");
}

// ---------------------------------------------------------------------------
// 07: the optimizer matches a dense grid search
// ---------------------------------------------------------------------------

const GRID_POINTS: usize = 200;
const GRID_RANGE: f64 = 3.0;
const GRID_TOL: f64 = 1e-3;
const GRID_OPT_ITERATIONS: usize = 20000;
const GRID_BUDGET: Duration = Duration::from_secs(60);

#[test]
fn acceptance_07_optimizer_matches_grid_search_minimum() {
    let started = Instant::now();
    // One two-wide token and no consistency weight reduce the objective to
    // the alignment term, which a dense grid over the plane can bound.
    let dims = MockDims { token_dim: 2, ..Default::default() };
    let bundle = MockBundleBuilder::new(0).dims(dims).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let a = random_image(&mut rng);
    let ap = random_image(&mut rng);
    let inputs = InversionInputs::new(&a, &ap, "t07_a", "t07_ap");
    let cfg = InversionConfig {
        n_tokens: 1,
        lambda_tc: 0.0,
        iterations: GRID_OPT_ITERATIONS,
        ..Default::default()
    };
    let out = optimize(&bundle, &inputs, &AnchorConfig::default(), &cfg).unwrap();
    assert!(!out.diverged);
    let final_total = cfg.lambda_clip
        * alignment_loss(
            &bundle,
            &out.tokens.embeddings,
            &out.interpolated_direction,
            ClipBridge::Encode,
        )
        .unwrap();

    let mut grid_best = f64::INFINITY;
    for i in 0..GRID_POINTS {
        for j in 0..GRID_POINTS {
            let x = -GRID_RANGE + 2.0 * GRID_RANGE * (i as f64) / ((GRID_POINTS - 1) as f64);
            let y = -GRID_RANGE + 2.0 * GRID_RANGE * (j as f64) / ((GRID_POINTS - 1) as f64);
            let rows = Array2::from_shape_vec((1, 2), vec![x, y]).unwrap();
            let value = cfg.lambda_clip
                * alignment_loss(&bundle, &rows, &out.interpolated_direction, ClipBridge::Encode)
                    .unwrap();
            grid_best = grid_best.min(value);
        }
    }

    assert!(
        final_total <= grid_best + GRID_TOL,
        "optimizer reached {final_total}, grid search found {grid_best}"
    );
    // And the optimizer genuinely moved: better than the neutral loss of an
    // uninformative direction.
    assert!(final_total < cfg.lambda_clip, "optimizer stayed at the neutral level");
    let elapsed = started.elapsed();
    assert!(elapsed < GRID_BUDGET, "grid comparison took {elapsed:?}");
    println!("acceptance 07 optimizer-vs-grid-search: PASS");
}

// ---------------------------------------------------------------------------
// 08: single-token hard-prompt inversion is exhaustive
// ---------------------------------------------------------------------------

const HARD_PROMPT_IMAGES: usize = 20;

#[test]
fn acceptance_08_single_token_prompt_inversion_matches_enumeration() {
    let bundle = MockBundleBuilder::new(0).build().unwrap();
    let settings = HardPromptSettings { length: 1, iters: 200, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for k in 0..HARD_PROMPT_IMAGES {
        let img = random_image(&mut rng);
        let target = bundle.encode_image(&img).unwrap();

        // Brute force over the whole vocabulary.
        let mut best_id = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for id in 0..bundle.vocab().size() {
            let encoded = bundle.encode_token_ids(&[id]).unwrap();
            let sim = cosine_similarity(&encoded, &target).unwrap();
            if sim > best_sim {
                best_sim = sim;
                best_id = id;
            }
        }

        let found =
            hard_prompt_invert(&bundle, &img, &format!("img{k}"), &settings, 4000 + k as u64)
                .unwrap();
        assert_eq!(
            found.token_ids,
            Some(vec![best_id]),
            "image {k}: search returned {:?}, enumeration found {best_id}",
            found.token_ids
        );
    }
    println!("acceptance 08 hard-prompt-enumeration: PASS");
}

// ---------------------------------------------------------------------------
// 09: directional score sanity
// ---------------------------------------------------------------------------

const SCORE_SYMMETRY_CASES: usize = 100;
const HAND_SCORE_TOL: f64 = 1e-6;

#[test]
fn acceptance_09_directional_score_sanity() {
    let [s_img, ..] = MockBundleBuilder::component_seeds(0);
    let enc = MockImageEncoder::from_seed(MockDims::default(), s_img);

    // Identical movement scores exactly 1; reversed movement exactly -1.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng);
    let ap = random_image(&mut rng);
    let same = directional_score(&enc, &a, &ap, &a, &ap).unwrap();
    assert_eq!(same.value, 1.0);
    assert!(!same.degenerate);
    let reversed = directional_score(&enc, &a, &ap, &ap, &a).unwrap();
    assert_eq!(reversed.value, -1.0);

    // Swapping which pair plays reference and which plays query cannot
    // change the score.
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for case in 0..SCORE_SYMMETRY_CASES {
        let (a, ap) = (random_image(&mut rng), random_image(&mut rng));
        let (b, bp) = (random_image(&mut rng), random_image(&mut rng));
        let s1 = directional_score(&enc, &a, &ap, &b, &bp).unwrap();
        let s2 = directional_score(&enc, &b, &bp, &a, &ap).unwrap();
        assert_eq!(s1.value.to_bits(), s2.value.to_bits(), "case {case}");
    }

    // Hand-computed case: rebuild both movement vectors with explicit loops
    // over the encoder's affine map and compare the cosines.
    let (a, ap) = (random_image(&mut rng), random_image(&mut rng));
    let (b, bp) = (random_image(&mut rng), random_image(&mut rng));
    let embed = |img: &RgbImage| -> Vec<f64> {
        let mut pixels = vec![0.0f64; 8 * 8 * 3];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[((y as usize) * 8 + (x as usize)) * 3 + c] = p[c] as f64 / 255.0;
            }
        }
        (0..16)
            .map(|j| {
                let mut acc = enc.bias()[j];
                for (k, v) in pixels.iter().enumerate() {
                    acc += enc.weight()[[j, k]] * v;
                }
                acc
            })
            .collect()
    };
    let (ea, eap, eb, ebp) = (embed(&a), embed(&ap), embed(&b), embed(&bp));
    let (mut dot, mut nref, mut nout) = (0.0, 0.0, 0.0);
    for j in 0..16 {
        let u = eap[j] - ea[j];
        let v = ebp[j] - eb[j];
        dot += u * v;
        nref += u * u;
        nout += v * v;
    }
    let by_hand = dot / (nref.sqrt() * nout.sqrt());
    let scored = directional_score(&enc, &a, &ap, &b, &bp).unwrap();
    assert!(
        (scored.value - by_hand).abs() <= HAND_SCORE_TOL,
        "scored {} vs hand-computed {by_hand}",
        scored.value
    );
    println!("acceptance 09 directional-score-sanity: PASS");
}

// ---------------------------------------------------------------------------
// 10: end-to-end determinism
// ---------------------------------------------------------------------------

const E2E_BUDGET: Duration = Duration::from_secs(60);

#[test]
fn acceptance_10_repeated_runs_are_byte_identical() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2, 2], None, 11).unwrap();

    let config_for = |output: &Path| {
        let mut cfg = RunConfig::default();
        cfg.output_dir = output.to_path_buf();
        cfg.eval.dataset = Some(manifest.clone());
        cfg.eval.count = 3;
        cfg.optim.iterations = 60;
        cfg.pipeline.steps = 12;
        cfg
    };
    let cfg_one = config_for(&dir.path().join("runs_one"));
    let cfg_two = config_for(&dir.path().join("runs_two"));

    let report_one = run_batch(&cfg_one, Stages::ALL, false, false).unwrap();
    let report_two = run_batch(&cfg_two, Stages::ALL, false, false).unwrap();
    assert_eq!(report_one.summary.triplet_count, 3);
    // The output directory is not part of a run's identity.
    assert_eq!(report_one.summary.run_id, report_two.summary.run_id);

    let tree_one = tree_bytes(&cfg_one.output_dir);
    let tree_two = tree_bytes(&cfg_two.output_dir);
    let names_one: Vec<&String> = tree_one.keys().collect();
    let names_two: Vec<&String> = tree_two.keys().collect();
    assert_eq!(names_one, names_two, "the two runs wrote different file sets");
    assert!(tree_one.len() > 20, "suspiciously small artifact tree: {}", tree_one.len());
    for (name, bytes) in &tree_one {
        assert_eq!(bytes, &tree_two[name], "file {name} differs between identical runs");
    }

    let elapsed = started.elapsed();
    assert!(elapsed < E2E_BUDGET, "two full runs took {elapsed:?}");
    println!("acceptance 10 end-to-end-determinism: PASS");
}

// ---------------------------------------------------------------------------
// 11: query sampling follows instruction groups
// ---------------------------------------------------------------------------

const SAMPLER_SEEDS: u64 = 50;

#[test]
fn acceptance_11_sampler_matches_instruction_groups() {
    let pair = |id: &str, instruction: &str| PairRecord {
        id: id.to_string(),
        before: format!("imgs/{id}_before.png").into(),
        after: format!("imgs/{id}_after.png").into(),
        instruction: instruction.to_string(),
    };

    // Two pairs sharing one instruction: each query is forced to be the
    // other pair's source image, with its edit as ground truth.
    let two = vec![pair("p0", "add rain"), pair("p1", "add rain")];
    for seed in 0..SAMPLER_SEEDS {
        let sample = sample_triplets(&two, 2, seed).unwrap();
        assert_eq!(sample.triplets.len(), 2);
        assert_eq!(sample.skipped_singleton_pairs, 0);
        for t in &sample.triplets {
            let partner = two.iter().find(|p| p.before != t.path_a).unwrap();
            assert_eq!(t.path_b, partner.before);
            assert_eq!(t.path_b_gt.as_ref(), Some(&partner.after));
            assert_ne!(t.path_b, t.path_a, "query must never be the pair's own source");
        }
    }

    // All-unique instructions leave nothing to sample, and every skipped
    // pair is counted.
    let singletons = vec![pair("s0", "one"), pair("s1", "two"), pair("s2", "three")];
    let empty = sample_triplets(&singletons, 5, 0).unwrap();
    assert!(empty.triplets.is_empty());
    assert_eq!(empty.skipped_singleton_pairs, 3);
    assert!(empty.truncated);

    // Mixed groups: the query always comes from a pair with the exact same
    // instruction string, and is never the edited pair itself.
    let mixed = vec![
        pair("r0", "make it red"),
        pair("r1", "make it red"),
        pair("r2", "make it red"),
        pair("b0", "tint it blue"),
        pair("b1", "tint it blue"),
        pair("solo", "emboss it"),
    ];
    let instruction_of: BTreeMap<_, _> =
        mixed.iter().map(|p| (p.before.clone(), p.instruction.clone())).collect();
    for seed in 0..SAMPLER_SEEDS {
        let sample = sample_triplets(&mixed, 5, seed).unwrap();
        assert_eq!(sample.triplets.len(), 5);
        assert_eq!(sample.skipped_singleton_pairs, 1);
        for t in &sample.triplets {
            let a_instruction = &instruction_of[&t.path_a];
            let b_instruction = &instruction_of[&t.path_b];
            assert_eq!(a_instruction, b_instruction, "query drawn from a different group");
            assert_eq!(t.instruction_text.as_ref(), Some(a_instruction));
            assert_ne!(t.path_b, t.path_a);
        }
    }
    println!("acceptance 11 sampler-instruction-groups: PASS");
}

// ---------------------------------------------------------------------------
// 12: instruction text never reaches the backend
// ---------------------------------------------------------------------------

/// A sentinel that cannot occur in any caption or prompt the backends emit.
const INSTRUCTION_MARKER: &str = "ZWQX-INSTRUCTION-MARKER";

#[test]
fn acceptance_12_instructions_never_reach_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let instructions = [
        format!("turn it {INSTRUCTION_MARKER} crimson"),
        format!("flood it with {INSTRUCTION_MARKER} light"),
    ];
    let instruction_refs: Vec<&str> = instructions.iter().map(String::as_str).collect();
    let manifest = write_demo_dataset(
        &dir.path().join("data"),
        &[2, 2],
        Some(&instruction_refs),
        13,
    )
    .unwrap();

    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().join("runs");
    cfg.eval.dataset = Some(manifest);
    cfg.eval.count = 3;
    cfg.optim.iterations = 15;
    cfg.pipeline.steps = 6;
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, cfg.canonical_toml().unwrap()).unwrap();

    // Run the real binary with the text audit enabled: every piece of text
    // any backend call sees is appended to the audit file.
    let audit_path = dir.path().join("backend_text_audit.log");
    let status = Command::new(env!("CARGO_BIN_EXE_diffinv"))
        .args([
            "--config",
            config_path.to_str().unwrap(),
            "--output-dir",
            cfg.output_dir.to_str().unwrap(),
            "run",
        ])
        .env(TEXT_AUDIT_ENV, &audit_path)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );

    let audit = std::fs::read_to_string(&audit_path).unwrap();
    assert!(!audit.trim().is_empty(), "the audit saw no backend text at all");
    assert!(
        !audit.contains(INSTRUCTION_MARKER),
        "instruction text leaked into a backend call:\n{audit}"
    );

    // The marker did flow through the system's metadata — it stops exactly
    // at the model boundary.
    let run_dir = cfg.run_dir().unwrap();
    let triplets = std::fs::read_to_string(run_dir.join("triplets.json")).unwrap();
    assert!(triplets.contains(INSTRUCTION_MARKER));

    // And the audit is genuinely recording prompts: the caption stored in a
    // triplet's prompt sidecar shows up in it.
    let some_triplet_dir = std::fs::read_dir(&run_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.is_dir())
        .expect("no per-triplet directory");
    let sidecar =
        std::fs::read_to_string(some_triplet_dir.join(artifact::PROMPT_BEFORE_FILE)).unwrap();
    let caption = sidecar.lines().nth(1).expect("sidecar caption line");
    assert!(
        audit.contains(caption),
        "audit does not contain the recorded prompt text '{caption}'"
    );
    println!("acceptance 12 instruction-redaction: PASS");
}

// ---------------------------------------------------------------------------
// 13: ablation sweeps share one cache
// ---------------------------------------------------------------------------

const SWEEP_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.8, 1.0];
const SWEEP_TOKEN_COUNTS: [usize; 5] = [1, 3, 5, 7, 10];

#[test]
fn acceptance_13_ablation_sweeps_reuse_cached_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2, 2], None, 17).unwrap();

    let base = {
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.path().join("runs");
        cfg.eval.dataset = Some(manifest);
        cfg.eval.count = 3;
        cfg.anchor.mode = AnchorMode::Pez;
        cfg.anchor.length = 3;
        cfg.anchor.iters = 40;
        cfg.optim.iterations = 30;
        cfg.pipeline.steps = 8;
        cfg
    };

    // One run per interpolation weight, then one per token count; the
    // (0.8, 5 tokens) setting appears in both sweeps on purpose.
    let mut settings = Vec::new();
    for alpha in SWEEP_ALPHAS {
        let mut cfg = base.clone();
        cfg.optim.alpha = alpha;
        settings.push(cfg);
    }
    for n_tokens in SWEEP_TOKEN_COUNTS {
        let mut cfg = base.clone();
        cfg.optim.alpha = 0.8;
        cfg.optim.n_tokens = n_tokens;
        settings.push(cfg);
    }

    let mut reports = Vec::new();
    for cfg in &settings {
        let report = run_batch(cfg, Stages::ALL, false, false)
            .unwrap_or_else(|e| panic!("sweep setting failed: {e}"));
        assert_eq!(report.summary.triplet_count, 3);
        assert!(report.summary.diverged.is_empty());
        reports.push(report);
    }

    // Every distinct setting owns its own artifact tree; the duplicated
    // setting resolves to the same tree as its first occurrence.
    let distinct: std::collections::BTreeSet<_> =
        reports.iter().map(|r| r.run_dir.clone()).collect();
    assert_eq!(distinct.len(), SWEEP_ALPHAS.len() + SWEEP_TOKEN_COUNTS.len() - 1);
    assert_eq!(reports[3].run_dir, reports[7].run_dir);

    // Each tree carries tokens of its own width.
    for (cfg, report) in settings.iter().zip(&reports) {
        let triplet_dirs: Vec<_> = std::fs::read_dir(&report.run_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        assert_eq!(triplet_dirs.len(), 3, "run {} lost triplets", report.summary.run_id);
        for tdir in triplet_dirs {
            let tokens = artifact::read_tokens(&tdir).unwrap();
            assert_eq!(tokens.nrows(), cfg.optim.n_tokens);
        }
        assert!(report.run_dir.join("scores.csv").exists());
    }

    // The first run pays for captions and anchor searches; every later run
    // reuses them from the shared cache and never re-captions.
    assert!(reports[0].summary.cache.caption_misses > 0);
    assert!(reports[0].summary.cache.anchor_misses > 0);
    for report in &reports[1..] {
        let s = &report.summary;
        assert_eq!(s.cache.caption_misses, 0, "run {} re-captioned", s.run_id);
        assert_eq!(s.cache.anchor_misses, 0, "run {} re-ran anchor search", s.run_id);
        assert_eq!(s.backend_calls.caption, 0, "run {} called the captioner", s.run_id);
    }

    // The duplicated setting is a pure resume: no backend work at all.
    assert_eq!(reports[7].summary.resumed_inversions, 3);
    assert_eq!(reports[7].summary.backend_calls.total(), 0);
    println!("acceptance 13 ablation-sweep-cache-reuse: PASS");
}
