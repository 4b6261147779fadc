//! Fixtures shared by the criterion benches in `benches/`.

use deseg_core::data::{collate, generate_dataset};
use deseg_core::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)` (no RNG dependency).
pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// A batch of `n` synthetic scenes at `size × size`.
pub fn scenes(n: usize, size: usize) -> (Tensor<f32>, Vec<u8>) {
    let samples = generate_dataset(n, size, 0).expect("scenes");
    let refs: Vec<_> = samples.iter().collect();
    collate(&refs).expect("collate")
}
