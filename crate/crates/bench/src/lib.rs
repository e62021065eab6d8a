//! Benchmark fixtures shared by the criterion targets.

use eyenet_core::{NetworkSpec, Tensor4};

/// Deterministic smooth test image of shape `[1, 1, h, w]`.
pub fn test_image(h: usize, w: usize) -> Tensor4<f32> {
    Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
        let dy = y as f32 / h as f32 - 0.5;
        let dx = x as f32 / w as f32 - 0.5;
        (-(dx * dx + dy * dy) * 8.0).exp()
    })
}

pub fn bench_spec() -> NetworkSpec {
    NetworkSpec::reduced()
}
