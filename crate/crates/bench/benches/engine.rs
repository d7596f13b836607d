use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specexit_bench::bench_suite;
use specexit_core::engine::{generate, generate_target_only, DecodeOptions};
use specexit_core::exit::{SmoothingMethod, StoppingConfig};
use specexit_core::{DraftHead, HiddenVector, SignalTriple, SmootherState};

fn engine(c: &mut Criterion) {
    let suite = bench_suite(4, 120);
    let task = &suite.tasks[0];
    let prompt = task.generation_prompt();
    let opts = DecodeOptions::default();
    let cfg = StoppingConfig::spec_exit_star();
    let mut g = c.benchmark_group("generate");
    g.bench_function("target_only", |b| {
        b.iter(|| generate_target_only(black_box(&prompt), &suite.target, &suite.markers, &opts).unwrap())
    });
    g.bench_function("spec_only", |b| {
        let o = DecodeOptions {
            early_exit: false,
            ..opts
        };
        b.iter(|| {
            generate(
                black_box(&prompt),
                &suite.draft,
                &suite.target,
                &cfg,
                &suite.markers,
                &o,
            )
            .unwrap()
        })
    });
    g.bench_function("specexit", |b| {
        b.iter(|| {
            generate(
                black_box(&prompt),
                &suite.draft,
                &suite.target,
                &cfg,
                &suite.markers,
                &opts,
            )
            .unwrap()
        })
    });
    g.finish();
}

fn head(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = DraftHead::random(256, 64, 0.1, &mut rng);
    let h = HiddenVector((0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
    c.bench_function("head_project_256x64", |b| {
        b.iter(|| head.project(black_box(&h)).unwrap())
    });
}

fn smoothers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stream: Vec<SignalTriple> = (0..1000)
        .map(|_| SignalTriple::new(rng.random(), rng.random(), rng.random_range(0.0..500.0)))
        .collect();
    let mut g = c.benchmark_group("smoother_1000");
    for m in SmoothingMethod::ablation_rows() {
        g.bench_function(m.label(), |b| {
            b.iter_batched(
                || SmootherState::new(m),
                |mut s| {
                    for x in &stream {
                        black_box(s.update(*x));
                    }
                },
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, engine, head, smoothers);
criterion_main!(benches);
