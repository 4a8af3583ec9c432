//! Multi-head attention is not identifiable from value queries: heads that
//! share one score matrix `A` and split a value vector `b` as `lambda_h b`
//! compute `alpha(X, A)^T X b` for every simplex vector `lambda`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{multihead_forward, AttentionParams, MultiHeadParams, SequenceInput};

pub const SAMPLING_DISCLAIMER: &str = "agreement on sampled inputs only; this is not a \
decision procedure for functional equality";

const SIMPLEX_SLACK: f64 = 1e-12;

fn check_simplex(weights: &[f64], name: &str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidInput(format!("{name} has no heads")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < -SIMPLEX_SLACK) {
        return Err(Error::InvalidInput(format!("{name} has a negative or non-finite weight")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_SLACK {
        return Err(Error::InvalidInput(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Two parameter sets with every head equal to `A` and value vectors
/// `lambda_h b` and `lambda'_h b`.
pub fn build_equivalent_pair(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: &[f64],
    lambda_prime: &[f64],
) -> Result<(MultiHeadParams, MultiHeadParams)> {
    check_simplex(lambda, "lambda")?;
    check_simplex(lambda_prime, "lambda'")?;
    if lambda.len() != lambda_prime.len() {
        return Err(Error::InvalidInput("weight vectors differ in head count".into()));
    }
    if lambda == lambda_prime {
        return Err(Error::InvalidInput("weight vectors must differ".into()));
    }
    if b.iter().all(|x| *x == 0.0) {
        return Err(Error::InvalidInput("b must be nonzero".into()));
    }
    let heads = |weights: &[f64]| -> Result<MultiHeadParams> {
        let heads = weights
            .iter()
            .map(|w| AttentionParams::new(a.clone(), b * *w))
            .collect::<Result<Vec<_>>>()?;
        MultiHeadParams::new(heads)
    };
    Ok((heads(lambda)?, heads(lambda_prime)?))
}

/// Euclidean distance between parameter lists, head by head.
pub fn parameter_distance(p1: &MultiHeadParams, p2: &MultiHeadParams) -> Result<f64> {
    if p1.num_heads() != p2.num_heads() {
        return Err(Error::Shape("head counts differ".into()));
    }
    let mut total = 0.0;
    for (h1, h2) in p1.heads.iter().zip(&p2.heads) {
        if h1.dim() != h2.dim() {
            return Err(Error::Shape("head dimensions differ".into()));
        }
        total += (&h1.score_matrix - &h2.score_matrix).norm_squared();
        total += (&h1.value_vector - &h2.value_vector).norm_squared();
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualityReport {
    pub agree: bool,
    pub max_abs_diff: f64,
    pub samples: usize,
    pub seed: u64,
    /// Row-major rows of the first input whose difference exceeded `tol`.
    pub witness: Option<Vec<Vec<f64>>>,
    pub disclaimer: String,
}

/// Compares two multi-head models on random inputs with `N` uniform in
/// `1..=max_len` and standard normal entries.
pub fn functional_equality_test(
    p1: &MultiHeadParams,
    p2: &MultiHeadParams,
    num_samples: usize,
    max_len: usize,
    tol: f64,
    seed: u64,
) -> Result<EqualityReport> {
    let d = p1.heads[0].dim();
    if p2.heads[0].dim() != d {
        return Err(Error::Shape("models differ in input dimension".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff = 0.0f64;
    let mut witness = None;
    for _ in 0..num_samples {
        let n = rng.random_range(1..=max_len);
        let x = SequenceInput::new(DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng)))?;
        let diff = (multihead_forward(p1, &x)? - multihead_forward(p2, &x)?).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if witness.is_none() && diff > tol {
            witness = Some(
                x.rows()
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
            );
        }
    }
    Ok(EqualityReport {
        agree: witness.is_none(),
        max_abs_diff,
        samples: num_samples,
        seed,
        witness,
        disclaimer: SAMPLING_DISCLAIMER.into(),
    })
}
