use criterion::{black_box, criterion_group, criterion_main, Criterion};

use sala_bench::{balls, pattern};
use sala_core::inference::cluster_threshold;
use sala_core::metrics::hd95;
use sala_core::network::{ops, Mode, NetworkConfig, ParameterSet};

fn conv(c: &mut Criterion) {
    let x = pattern::<f32>([2, 32, 64, 64]);
    let weight: Vec<f32> = (0..64 * 32 * 9).map(|i| ((i % 17) as f32 - 8.0) * 0.01).collect();
    let bias = vec![0.0f32; 64];
    c.bench_function("conv2d 3x3 32->64 at 2x64x64", |b| {
        b.iter(|| ops::conv2d(black_box(&x), &weight, &bias, 64, 3))
    });
}

fn forward(c: &mut Criterion) {
    let cfg = NetworkConfig::with_filters(&[8, 16, 32, 64]);
    let net = ParameterSet::<f32>::new_initialized(&cfg, 0).expect("valid config");
    let sa = pattern::<f32>([2, 1, 128, 128]);
    let la = pattern::<f32>([2, 1, 128, 128]);
    c.bench_function("dual U-Net forward [8,16,32,64] at 2x128x128", |b| {
        b.iter(|| net.forward(black_box(&sa), black_box(&la), Mode::Eval).expect("forward"))
    });
}

fn distance(c: &mut Criterion) {
    let pred = balls([10, 128, 128], &[[5.0, 60.0, 60.0]], 20.0);
    let gt = balls([10, 128, 128], &[[5.0, 66.0, 58.0]], 22.0);
    c.bench_function("hd95 10x128x128", |b| {
        b.iter(|| hd95(black_box(&pred), black_box(&gt), 2, [10.0, 1.25, 1.25]).expect("hd95"))
    });
}

fn clusters(c: &mut Criterion) {
    let labels = balls(
        [10, 128, 128],
        &[[5.0, 40.0, 40.0], [5.0, 100.0, 100.0], [2.0, 20.0, 110.0]],
        12.0,
    );
    c.bench_function("cluster_threshold 10x128x128", |b| {
        b.iter(|| cluster_threshold(black_box(&labels), 0.1).expect("threshold"))
    });
}

criterion_group!(benches, conv, forward, distance, clusters);
criterion_main!(benches);
