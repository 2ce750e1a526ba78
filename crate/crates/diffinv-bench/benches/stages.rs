//! Benchmarks for the full pipeline stages: anchor search, token
//! optimization, query editing, and scoring.

use std::hint::black_box;

use criterion::{Criterion, criterion_group, criterion_main};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffinv_bench::{loss_inputs, random_image, token_rows};
use diffinv_core::anchoring::{HardPromptSettings, hard_prompt_invert};
use diffinv_core::config::{AnchorConfig, BackendConfig, InversionConfig, PipelineConfig, TokenMode};
use diffinv_core::evalharness::score_triplet;
use diffinv_core::inversion::DiffTokens;
use diffinv_core::{InversionInputs, eval_encoders, generate_bprime, optimize};

fn bench_hard_prompt(c: &mut Criterion) {
    let f = loss_inputs(5);
    let settings = HardPromptSettings { length: 3, iters: 40, ..Default::default() };
    c.bench_function("stage/hard_prompt_invert", |b| {
        b.iter(|| {
            hard_prompt_invert(&f.bundle, black_box(&f.image_before), "bench", &settings, 7)
                .unwrap()
        })
    });
}

fn bench_optimize(c: &mut Criterion) {
    let f = loss_inputs(6);
    let inputs = InversionInputs::new(&f.image_before, &f.image_after, "bench_a", "bench_ap");
    let cfg = InversionConfig { n_tokens: 3, iterations: 20, ..Default::default() };
    c.bench_function("stage/optimize_20_iterations", |b| {
        b.iter(|| optimize(&f.bundle, black_box(&inputs), &AnchorConfig::default(), &cfg).unwrap())
    });
}

fn bench_generate(c: &mut Criterion) {
    let f = loss_inputs(7);
    let tokens = DiffTokens::from_matrix(token_rows(71, 3, f.bundle.token_dim()), TokenMode::Soft);
    let cfg = PipelineConfig { steps: 8, ..Default::default() };
    c.bench_function("stage/generate_bprime_8_steps", |b| {
        b.iter(|| {
            generate_bprime(
                &f.bundle,
                black_box(&f.image_before),
                &f.anchor_before,
                &tokens,
                &cfg,
            )
            .unwrap()
        })
    });
}

fn bench_score(c: &mut Criterion) {
    let encoders = eval_encoders(&BackendConfig::default(), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let (a, ap) = (random_image(&mut rng), random_image(&mut rng));
    let (b_img, bp) = (random_image(&mut rng), random_image(&mut rng));
    c.bench_function("stage/score_triplet", |b| {
        b.iter(|| {
            score_triplet(&encoders, "bench", black_box(&a), &ap, &b_img, &bp).unwrap()
        })
    });
}

criterion_group!(benches, bench_hard_prompt, bench_optimize, bench_generate, bench_score);
criterion_main!(benches);
