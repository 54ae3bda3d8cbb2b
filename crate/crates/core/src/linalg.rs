//! Small dense helpers shared by the encoder, style and retrieval code.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `[-bound, bound]`.
pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..=bound))
}

/// Xavier/Glorot uniform bound for a `fan_in x fan_out` map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Gradient through `e = z / |z|` given the upstream gradient on `e`.
pub fn normalize_backward(unit: &[f64], z_norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(e, d)| (d - e * proj) / z_norm)
        .collect()
}
