//! Wall-clock benchmarks of the hot kernels under the compiled execution
//! backend. The backend name (`parallel` or `sequential`) is part of every
//! benchmark ID, so running
//!
//! ```text
//! cargo bench --bench scaling
//! cargo bench --bench scaling --no-default-features
//! ```
//!
//! produces directly comparable entries for both backends in
//! `target/criterion/`. Results are bit-identical across backends; only the
//! timing differs.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use voxmamba::model::{mae_forward, plan_for, reconstruction_loss, MaeConfig, MaeModel};
use voxmamba::numcore::ops;
use voxmamba::numcore::tape::{ParamStore, Tape};
use voxmamba::numcore::tensor::Tensor;
use voxmamba::ssm::selective_scan_raw;
use voxmamba::vim::{stack_forward, VimStack};
use voxmamba::volume3d::{patchify, unpatchify};

fn backend() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn rand_tensor(r: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn bench_selective_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("selective_scan/{}", backend()));
    group.sample_size(20);
    group.warm_up_time(Duration::from_secs(1));
    group.measurement_time(Duration::from_secs(3));
    let (d, n) = (64usize, 8usize);
    let mut r = ChaCha12Rng::seed_from_u64(1);
    let a = rand_tensor(&mut r, &[d, n], -1.0, -0.1);
    for t in [64usize, 256, 1024] {
        let x = rand_tensor(&mut r, &[1, t, d], -1.0, 1.0);
        let delta = rand_tensor(&mut r, &[1, t, d], 0.05, 0.5);
        let b = rand_tensor(&mut r, &[1, t, n], -1.0, 1.0);
        let cc = rand_tensor(&mut r, &[1, t, n], -1.0, 1.0);
        group.throughput(Throughput::Elements((t * d * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, dv) = (tape.leaf(x.clone()), tape.leaf(delta.clone()));
                let (av, bv, cv) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(cc.clone()));
                let y = selective_scan_raw(&mut tape, xv, dv, av, bv, cv).unwrap();
                tape.value(y).data()[0]
            })
        });
    }
    group.finish();
}

fn bench_encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("encoder_forward/{}", backend()));
    group.sample_size(10);
    group.warm_up_time(Duration::from_secs(1));
    group.measurement_time(Duration::from_secs(3));
    let dim = 64usize;
    let mut r = ChaCha12Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let stack = VimStack::init(&mut store, "enc", 2, dim, 8, &mut r);
    for t in [64usize, 256, 1024] {
        let tokens = rand_tensor(&mut r, &[1, t, dim], -1.0, 1.0);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let tv = tape.leaf(tokens.clone());
                let y = stack_forward(&mut tape, &store, &stack, tv).unwrap();
                tape.value(y).data()[0]
            })
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("matmul/{}", backend()));
    group.sample_size(30);
    group.warm_up_time(Duration::from_secs(1));
    group.measurement_time(Duration::from_secs(3));
    let mut r = ChaCha12Rng::seed_from_u64(3);
    for m in [64usize, 256] {
        let a = rand_tensor(&mut r, &[m, 256], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[256, 256], -1.0, 1.0);
        group.throughput(Throughput::Elements((m * 256 * 256) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let y = ops::matmul(&mut tape, av, bv).unwrap();
                tape.value(y).data()[0]
            })
        });
    }
    group.finish();
}

fn bench_patch_roundtrip(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("patch_roundtrip/{}", backend()));
    group.sample_size(20);
    group.warm_up_time(Duration::from_secs(1));
    group.measurement_time(Duration::from_secs(3));
    let mut r = ChaCha12Rng::seed_from_u64(4);
    let volume = rand_tensor(&mut r, &[1, 2, 64, 64, 64], 0.0, 1.0);
    group.throughput(Throughput::Elements(volume.numel() as u64));
    group.bench_function("64cubed_p8", |bench| {
        bench.iter(|| {
            let (tokens, geom) = patchify(&volume, 8).unwrap();
            unpatchify(&tokens, &geom).unwrap().data()[0]
        })
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("train_step/{}", backend()));
    group.sample_size(10);
    group.warm_up_time(Duration::from_secs(1));
    group.measurement_time(Duration::from_secs(5));
    let cfg = MaeConfig {
        enc_depth: 2,
        enc_dim: 32,
        dec_depth: 1,
        dec_dim: 16,
        patch: 8,
        channels: 2,
        volume: (32, 32, 32),
        mask_ratio: 0.75,
        norm_targets: false,
        n_state: 4,
    };
    let mut r = ChaCha12Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let model = MaeModel::init(cfg, &mut store, &mut r).unwrap();
    let batch = rand_tensor(&mut r, &[4, 2, 32, 32, 32], 0.0, 1.0);
    let plan = plan_for(&model, 6).unwrap();
    group.bench_function("mae_fwd_bwd_b4", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (pred, target) = mae_forward(&mut tape, &store, &model, &batch, &plan).unwrap();
            let loss = reconstruction_loss(&mut tape, pred, &target, &plan, false).unwrap();
            tape.backward(loss).unwrap();
            tape.value(loss).data()[0]
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_selective_scan,
    bench_encoder_forward,
    bench_matmul,
    bench_patch_roundtrip,
    bench_train_step
);
criterion_main!(benches);
