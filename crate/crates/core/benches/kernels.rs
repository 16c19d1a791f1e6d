//! Kernel timings labelled by execution mode. Compare
//! `cargo bench`, `RAYON_NUM_THREADS=1 cargo bench` and
//! `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctn_core::metrics::{evaluate, EvalOptions};
use ctn_core::nn::Conv3d;
use ctn_core::ops::Conv3dGeometry;
use ctn_core::params::{Bound, ParamStore};
use ctn_core::swin3d::{SwinConfig, SwinTransformer};
use ctn_core::volio::{generate_phantom, resize_volume, PhantomSpec};
use ctn_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mode() -> String {
    if cfg!(feature = "parallel") {
        format!("rayon-{}", ctn_core::par::num_threads())
    } else {
        "sequential".to_string()
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let geom = Conv3dGeometry {
        kernel: [3; 3],
        stride: [1; 3],
        padding: [1; 3],
    };
    let layer = Conv3d::new(&mut store, "c", 8, 8, geom, false, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 8, 32, 32, 32], 1.0, &mut rng);
    let mut group = c.benchmark_group("conv3d_8x32^3");
    group.bench_function(BenchmarkId::from_parameter(mode()), |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            let p = Bound::new(&tape, &store);
            let xv = tape.constant(x.clone());
            layer.forward(&p, xv).unwrap()
        })
    });
    group.finish();
}

fn attention(c: &mut Criterion) {
    let cfg = SwinConfig {
        stage_channels: [32, 64, 128, 256],
        stage_depths: [2, 2, 2, 2],
        num_heads: [4, 4, 8, 8],
        ..SwinConfig::default()
    };
    let mut store = ParamStore::new();
    let swin = SwinTransformer::new(&cfg, &mut store, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = [16; 3];
    let h = Tensor::randn(&[4096, 32], 1.0, &mut rng);
    let mut group = c.benchmark_group("shifted_window_attention_16^3");
    group.bench_function(BenchmarkId::from_parameter(mode()), |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            let p = Bound::new(&tape, &store);
            let hv = tape.constant(h.clone());
            swin.attention(&p, &swin.blocks(0)[1].attn, hv, 1, grid).unwrap().out
        })
    });
    group.finish();
}

fn resize_and_metrics(c: &mut Criterion) {
    let (volume, label) = generate_phantom(&PhantomSpec::default()).unwrap();
    let mut group = c.benchmark_group("volume_ops_64^3");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("resize_to_96", mode()), |b| {
        b.iter(|| resize_volume(&volume, [96; 3]).unwrap())
    });
    group.bench_function(BenchmarkId::new("evaluate", mode()), |b| {
        b.iter(|| evaluate(&label, &label, &EvalOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, attention, resize_and_metrics);
criterion_main!(benches);
