#![allow(dead_code)]

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use qkd_core::qsim::{CircuitParams, Statevector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || gaussian(rng))
}

pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(n, || gaussian(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

pub fn random_angles(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect()
}

pub fn random_params(rng: &mut ChaCha8Rng, layers: usize, qubits: usize) -> CircuitParams {
    CircuitParams::new(random_angles(rng, layers * qubits), layers, qubits).unwrap()
}

pub fn random_state(rng: &mut ChaCha8Rng, qubits: usize) -> Statevector {
    let amps: Vec<Complex64> = (0..1usize << qubits)
        .map(|_| Complex64::new(gaussian(rng), gaussian(rng)))
        .collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    Statevector::from_amplitudes(amps.into_iter().map(|a| a / norm).collect()).unwrap()
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}
