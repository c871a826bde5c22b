#![allow(dead_code)]

use ndarray::Array2;
use otselect_core::oracle::{synth_pools, GradModel, SynthSpec};
use otselect_core::{DistanceMatrix, Pool, PooCostMatrix};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| rng.random_range(lo..hi))
}

pub fn random_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut s = sample(rng, n, k).into_vec();
    s.sort_unstable();
    s
}

/// Cost matrix from random points in the plane with random gradient norms,
/// so rows carry genuine metric structure plus a per-row shift.
pub fn random_poo(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lambda: f64) -> (DistanceMatrix, Vec<f64>, PooCostMatrix) {
    let dim = 3;
    let train: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let val: Vec<f32> = (0..cols * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let g: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..2.0)).collect();
    let t = Pool::new(otselect_core::PoolRole::Training, dim, train, None, None).unwrap();
    let v = Pool::new(otselect_core::PoolRole::Validation, dim, val, None, None).unwrap();
    let d = DistanceMatrix::compute(&t, &v).unwrap();
    let m = PooCostMatrix::build(&d, &g, lambda).unwrap();
    (d, g, m)
}

/// Synthetic pools with heterogeneous (lognormal, distance-correlated)
/// gradient norms.
pub fn hetero_pools(seed: u64, n_train: usize, n_val: usize) -> (Pool, Pool) {
    let mut spec = SynthSpec::new(seed, n_train, n_val, 4, 4);
    spec.grad_model = GradModel::LogNormal { mu: -0.5, sigma: 0.8 };
    spec.grad_correlated = true;
    spec.val_shift = 0.3;
    synth_pools(&spec).unwrap()
}
