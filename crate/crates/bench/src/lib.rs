//! Deterministic inputs shared by the benchmarks.

use sala_core::dataio::LabelMap;
use sala_core::network::{Real, Tensor};

/// Label map holding one ball of label 2 per centre, each of `radius` voxels.
pub fn balls(shape: [usize; 3], centres: &[[f64; 3]], radius: f64) -> LabelMap {
    let [d, h, w] = shape;
    let mut data = vec![0u8; d * h * w];
    for (i, v) in data.iter_mut().enumerate() {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        let inside = centres.iter().any(|c| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            r2 <= radius * radius
        });
        if inside {
            *v = 2;
        }
    }
    LabelMap::new(shape, [1.0, 1.0, 1.0], data).expect("consistent shape")
}

/// Smooth, reproducible test pattern in `B × C × H × W` order.
pub fn pattern<T: Real>(shape: [usize; 4]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|i| T::lit(((i as f64) * 0.37).sin())).collect();
    Tensor::from_nchw(shape, &data)
}
