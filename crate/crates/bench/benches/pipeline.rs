use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dmcl_bench::fixture;
use dmcl_core::encoders::{encode_image, encode_text};
use dmcl_core::objective::{global_nce, local_nce, sigma_local_score, total_loss, LossWeights};
use dmcl_core::trainer::{train, TrainConfig};

fn bench_encoders(c: &mut Criterion) {
    let f = fixture(8);
    let sample = &f.corpus.samples[0];
    c.bench_function("encode_text L=8 d=32", |b| {
        b.iter(|| encode_text(std::hint::black_box(&sample.text), &f.params).unwrap())
    });
    c.bench_function("encode_image M2=4 d=32", |b| {
        b.iter(|| encode_image(std::hint::black_box(&sample.image), &f.params).unwrap())
    });
}

fn bench_losses(c: &mut Criterion) {
    let w = LossWeights::default();
    for n in [4usize, 8] {
        let f = fixture(n);
        let texts: Vec<_> = f.corpus.samples[..n]
            .iter()
            .map(|s| encode_text(&s.text, &f.params).unwrap())
            .collect();
        let images: Vec<_> = f.corpus.samples[..n]
            .iter()
            .map(|s| encode_image(&s.image, &f.params).unwrap())
            .collect();
        c.bench_with_input(BenchmarkId::new("global_nce", n), &n, |b, _| {
            b.iter(|| global_nce(&texts, &images, &w).unwrap())
        });
        c.bench_with_input(BenchmarkId::new("local_nce", n), &n, |b, _| {
            b.iter(|| local_nce(&texts, &images, &w).unwrap())
        });
    }

    let f = fixture(2);
    let t = encode_text(&f.corpus.samples[0].text, &f.params).unwrap();
    let i = encode_image(&f.corpus.samples[0].image, &f.params).unwrap();
    c.bench_function("sigma_local_score L=8 M2=4", |b| {
        b.iter(|| sigma_local_score(&t, &i, &w).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let w = LossWeights::default();
    let f = fixture(8);
    let texts: Vec<_> = f.corpus.samples[..8].iter().map(|s| &s.text).collect();
    let images: Vec<_> = f.corpus.samples[..8].iter().map(|s| &s.image).collect();
    c.bench_function("total_loss forward N=8", |b| {
        b.iter(|| total_loss(&texts, &images, &f.params, &f.teacher, &w).unwrap())
    });

    c.bench_function("train 1 epoch N=8 (fwd+bwd+update)", |b| {
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 1,
            grad_accumulation_steps: 1,
            learning_rate: 1e-3,
            seed: 3,
            ..Default::default()
        };
        b.iter(|| train(std::hint::black_box(&f.corpus), &cfg).unwrap())
    });
}

criterion_group!(benches, bench_encoders, bench_losses, bench_training_step);
criterion_main!(benches);
