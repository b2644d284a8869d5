//! Timings for the kernels that dominate a search: dense products, the SPD
//! inverse, layer pruning, the forward pass, the projector gradient and a
//! whole-model policy application.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use prunelab_core::calib::{make_teacher, sample_dataset, DatasetSpec, Split};
use prunelab_core::model::{forward, grad_projector, ModelConfig, Sample, ToyVLM};
use prunelab_core::obs::accumulate_hessian;
use prunelab_core::oracle::random_matrix;
use prunelab_core::seed::rng_for;
use prunelab_core::{apply_policy, gemm, obs_prune_layer, spd_inverse, Policy, PruneOptions, RatioGrid};

fn task(n_samples: usize) -> (ToyVLM, Vec<Sample>) {
    let cfg = ModelConfig::default();
    let teacher = make_teacher(cfg, 0).unwrap();
    let data = sample_dataset(
        &teacher,
        &DatasetSpec {
            n_samples,
            seq_len: cfg.seq_len,
            seed: 0,
            split: Split::Proxy,
        },
    )
    .unwrap();
    (teacher, data)
}

fn linalg(c: &mut Criterion) {
    let mut rng = rng_for(0, "bench", 0);
    let a = random_matrix(64, 64, &mut rng);
    let b = random_matrix(64, 64, &mut rng);
    c.bench_function("gemm 64x64", |bench| bench.iter(|| gemm(black_box(&a), black_box(&b)).unwrap()));

    let x = random_matrix(64, 256, &mut rng);
    let h = accumulate_hessian(&x).unwrap();
    let hm = h.matrix();
    c.bench_function("spd_inverse 64", |bench| bench.iter(|| spd_inverse(black_box(&hm), 0.01).unwrap()));

    let w = random_matrix(32, 64, &mut rng);
    c.bench_function("obs_prune_layer 32x64 @0.5", |bench| {
        bench.iter(|| obs_prune_layer(black_box(&w), &h, 0.5, 16, 0.01).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (m, data) = task(8);
    c.bench_function("forward 1 sample", |bench| bench.iter(|| forward(black_box(&m), &data[0]).unwrap()));
    c.bench_function("grad_projector 8 samples", |bench| {
        bench.iter(|| grad_projector(black_box(&m), &data).unwrap())
    });
    let policy = Policy::uniform(RatioGrid::new(0.5).unwrap(), m.config.n_blocks);
    let opts = PruneOptions::default();
    let mut group = c.benchmark_group("apply_policy");
    group.sample_size(10);
    group.bench_function("8 calibration samples", |bench| {
        bench.iter(|| apply_policy(black_box(&m), &policy, &data, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, linalg, model);
criterion_main!(benches);
