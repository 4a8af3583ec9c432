//! Seeded instances shared by the benchmarks.

use attnprobe_core::{AttentionParams, RopSystem, SequenceInput};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn attention(d: usize, seed: u64) -> AttentionParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_matrix(&mut rng, d, d) / (d as f64);
    AttentionParams::new(w, gaussian_vector(&mut rng, d)).expect("square parameters")
}

pub fn sequence(n: usize, d: usize, seed: u64) -> SequenceInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceInput::new(gaussian_matrix(&mut rng, n, d)).expect("non-empty input")
}

/// Gaussian rank-one probes of a random rank-`r` matrix with unit norm.
pub fn lowrank_system(d: usize, r: usize, m: usize, seed: u64) -> (RopSystem, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_matrix(&mut rng, d, r) * gaussian_matrix(&mut rng, r, d);
    let w = &w / w.norm();
    let pairs: Vec<_> = (0..m)
        .map(|_| (gaussian_vector(&mut rng, d), gaussian_vector(&mut rng, d)))
        .collect();
    let t = DVector::from_iterator(m, pairs.iter().map(|(a, b)| a.dot(&(&w * b))));
    (RopSystem::new(&pairs, t).expect("consistent system"), w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowrank_system_is_consistent() {
        let (sys, w) = lowrank_system(6, 2, 30, 1);
        let t = attnprobe_core::sensing::apply_operator(&sys, &w).unwrap();
        assert!((t - sys.measurements()).norm() < 1e-12);
    }
}
