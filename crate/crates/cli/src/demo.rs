//! Demonstration that multi-head parameters are not identifiable.

use attnprobe_core::{
    build_equivalent_pair, functional_equality_test, parameter_distance, EqualityReport, Model,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::model_io::ModelFile;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub heads: usize,
    pub d: usize,
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub first: ModelFile,
    pub second: ModelFile,
    pub value_norm: f64,
    pub parameter_distance: f64,
    pub equality: EqualityReport,
}

fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Normalised exponentials are uniform on the simplex.
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

pub fn demo_multihead(
    heads: usize,
    d: usize,
    seed: u64,
    samples: usize,
    max_len: usize,
) -> CliResult<DemoReport> {
    if heads < 2 {
        return Err(CliError::Invalid("need at least two heads".into()));
    }
    if d == 0 {
        return Err(CliError::Invalid("dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "demo-params"));
    let a = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let b = loop {
        let b = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        if b.norm() > 0.0 {
            break b;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "demo-weights"));
    let lambda = simplex_point(&mut rng, heads);
    let lambda_prime = simplex_point(&mut rng, heads);
    let (p, q) = build_equivalent_pair(&a, &b, &lambda, &lambda_prime)?;
    let equality = functional_equality_test(
        &p,
        &q,
        samples,
        max_len,
        1e-12,
        derive_seed(seed, "demo-samples"),
    )?;
    Ok(DemoReport {
        heads,
        d,
        seed,
        lambda,
        lambda_prime,
        parameter_distance: parameter_distance(&p, &q)?,
        first: ModelFile::from_model(&Model::MultiHead(p)),
        second: ModelFile::from_model(&Model::MultiHead(q)),
        value_norm: b.norm(),
        equality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_agrees_but_differs() {
        let r = demo_multihead(3, 4, 11, 500, 6).unwrap();
        assert!(r.equality.agree);
        assert!(r.equality.max_abs_diff <= 1e-12);
        assert!(r.parameter_distance > 0.0);
        assert_ne!(r.first, r.second);
        assert!((r.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_head_is_rejected() {
        assert!(demo_multihead(1, 4, 0, 10, 3).is_err());
    }
}
