#![allow(dead_code)]

use edge_transformer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic test inputs shared with the offline scratch scripts that
/// produced the frozen expected values: `sin(0.37 k + seed)`.
pub fn det(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|k| (0.37 * k as f64 + seed).sin()).collect()
}

pub fn det_tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, det(n, seed)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        let scale = 1f64.max(w.abs());
        assert!((g - w).abs() <= tol * scale, "{what}[{k}]: got {g}, want {w}");
    }
}
