use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use occu_bench::{default_vt, random_costs, random_tensor};
use occu_core::detection::matching::hungarian;
use occu_core::tensor::{no_grad, ConvSpec};
use occu_core::vt::apply_vt;
use std::hint::black_box;

fn conv3d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(20);
    for (cin, cout, side) in [(8, 16, 16), (16, 32, 20)] {
        let x = random_tensor(&[1, cin, side, side, 8], 1);
        let w = random_tensor(&[cout, cin, 3, 3, 3], 2);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{cin}->{cout}@{side}x{side}x8")), &(), |b, _| {
            b.iter(|| no_grad(|| black_box(x.conv3d(&w, None, ConvSpec::new(1, 1)).unwrap())))
        });
    }
    g.finish();
}

fn view_transform(c: &mut Criterion) {
    let (cfg, vt) = default_vt();
    let channels = cfg.model.image.feature_channels;
    let mut g = c.benchmark_group("apply_vt");
    for (l, level) in vt.levels.iter().enumerate() {
        let (h, w) = level.feature_hw;
        let x = random_tensor(&[1, cfg.scene.cameras, channels, h, w], 3);
        g.bench_with_input(BenchmarkId::from_parameter(format!("level{}", l + 1)), &(), |b, _| {
            b.iter(|| no_grad(|| black_box(apply_vt(&x, level).unwrap())))
        });
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for (rows, cols) in [(6, 6), (8, 100), (30, 100)] {
        let cost = random_costs(rows, cols, 4);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &(), |b, _| {
            b.iter(|| black_box(hungarian(&cost, rows, cols).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv3d, view_transform, matching);
criterion_main!(benches);
