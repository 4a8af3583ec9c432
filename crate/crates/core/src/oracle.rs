//! Black-box query access to a hidden model.
//!
//! Recovery algorithms only ever hold an oracle; they never see the
//! parameters. Two protocols exist: exact value queries (`vq`) and
//! deterministic approximate value queries with tolerance `tau` (`avq`).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, SequenceInput};

/// How an approximate oracle perturbs the true value. Every policy keeps the
/// returned value within `tau` of the truth and is a pure function of the
/// query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "variant")]
pub enum NoisePolicy {
    /// Round to the nearest multiple of `tau`.
    Quantize,
    /// Add `+tau` or `-tau`, the sign chosen by hashing the seed and the input.
    HashSign { seed: u64 },
    /// Return the true value.
    Zero,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy::Quantize
    }
}

impl NoisePolicy {
    fn perturb(&self, truth: f64, tau: f64, key: &[u8]) -> f64 {
        match *self {
            NoisePolicy::Zero => truth,
            NoisePolicy::Quantize => {
                if tau == 0.0 {
                    return truth;
                }
                let q = (truth / tau).round() * tau;
                // Rounding of q itself can overshoot by an ulp for huge ratios.
                if (q - truth).abs() <= tau {
                    q
                } else {
                    truth
                }
            }
            NoisePolicy::HashSign { seed } => {
                let mut hasher = Sha256::new();
                hasher.update(seed.to_le_bytes());
                hasher.update(key);
                let digest = hasher.finalize();
                let sign = if digest[0] & 1 == 0 { 1.0 } else { -1.0 };
                // Shave a few ulps so the sum never lands outside the band.
                let y = truth + sign * tau * (1.0 - 1e-12);
                if (y - truth).abs() <= tau {
                    y
                } else {
                    truth
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    Exact,
    /// Approximate queries; requests below `floor` are refused.
    Approximate { policy: NoisePolicy, floor: f64 },
}

/// A hidden model behind a query protocol, with strict accounting.
///
/// Every `vq`/`avq` call increments the counter, including calls answered
/// from the cache.
#[derive(Debug, Clone)]
pub struct OracleSession {
    model: Model,
    mode: OracleMode,
    query_count: u64,
    cache: HashMap<Vec<u8>, f64>,
}

impl OracleSession {
    pub fn exact(model: Model) -> Self {
        Self {
            model,
            mode: OracleMode::Exact,
            query_count: 0,
            cache: HashMap::new(),
        }
    }

    pub fn approximate(model: Model, policy: NoisePolicy, floor: f64) -> Result<Self> {
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tolerance floor must be finite and nonnegative, got {floor}"
            )));
        }
        Ok(Self {
            model,
            mode: OracleMode::Approximate { policy, floor },
            query_count: 0,
            cache: HashMap::new(),
        })
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    /// The smallest tolerance this session will honour (0 in exact mode).
    pub fn tolerance(&self) -> f64 {
        match self.mode {
            OracleMode::Exact => 0.0,
            OracleMode::Approximate { floor, .. } => floor,
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model_kind(&self) -> crate::model::ModelKind {
        self.model.kind()
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    /// Exact value query.
    pub fn vq(&mut self, x: &SequenceInput) -> Result<f64> {
        if !matches!(self.mode, OracleMode::Exact) {
            return Err(Error::Protocol(
                "vq called on an approximate-mode session; use avq".into(),
            ));
        }
        self.query_count += 1;
        let key = x.canonical_bytes();
        if let Some(y) = self.cache.get(&key) {
            return Ok(*y);
        }
        let y = self.model.forward(x)?;
        self.cache.insert(key, y);
        Ok(y)
    }

    /// Approximate value query: the answer is within `tau` of the truth.
    pub fn avq(&mut self, x: &SequenceInput, tau: f64) -> Result<f64> {
        let OracleMode::Approximate { policy, floor } = self.mode else {
            return Err(Error::Protocol(
                "avq called on an exact-mode session; use vq".into(),
            ));
        };
        if !(tau >= floor) || !tau.is_finite() {
            return Err(Error::ToleranceUnsatisfiable {
                requested: tau,
                floor,
            });
        }
        self.query_count += 1;
        let mut key = x.canonical_bytes();
        key.extend_from_slice(&tau.to_bits().to_le_bytes());
        if let Some(y) = self.cache.get(&key) {
            return Ok(*y);
        }
        let truth = self.model.forward(x)?;
        let y = policy.perturb(truth, tau, &key);
        self.cache.insert(key, y);
        Ok(y)
    }
}

/// Anything that answers exact value queries about a single-head attention
/// function of known dimension.
pub trait ValueOracle {
    fn dim(&self) -> usize;

    fn value(&mut self, x: &SequenceInput) -> Result<f64>;

    /// Queries issued against the underlying black box so far.
    fn queries_issued(&self) -> u64;
}

impl ValueOracle for OracleSession {
    fn dim(&self) -> usize {
        OracleSession::dim(self)
    }

    fn value(&mut self, x: &SequenceInput) -> Result<f64> {
        self.vq(x)
    }

    fn queries_issued(&self) -> u64 {
        self.query_count
    }
}

impl<O: ValueOracle + ?Sized> ValueOracle for &mut O {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn value(&mut self, x: &SequenceInput) -> Result<f64> {
        (**self).value(x)
    }

    fn queries_issued(&self) -> u64 {
        (**self).queries_issued()
    }
}

/// One recorded query: the canonical input bytes and the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub input: Vec<u8>,
    pub value: f64,
}

/// Wraps an oracle and records every query it forwards.
pub struct Recording<O> {
    inner: O,
    transcript: Vec<TranscriptEntry>,
}

impl<O: ValueOracle> Recording<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            transcript: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn into_parts(self) -> (O, Vec<TranscriptEntry>) {
        (self.inner, self.transcript)
    }
}

impl<O: ValueOracle> ValueOracle for Recording<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&mut self, x: &SequenceInput) -> Result<f64> {
        let value = self.inner.value(x)?;
        self.transcript.push(TranscriptEntry {
            input: x.canonical_bytes(),
            value,
        });
        Ok(value)
    }

    fn queries_issued(&self) -> u64 {
        self.inner.queries_issued()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_forward, AttentionParams};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn toy_model() -> AttentionParams {
        AttentionParams::new(
            DMatrix::from_row_slice(4, 4, &[
                0.3, -1.0, 0.2, 0.0, 1.5, 0.4, -0.7, 0.9, -0.2, 0.8, 0.1, -1.3, 0.6, 0.0, 0.5, 0.2,
            ]),
            DVector::from_vec(vec![0.5, -0.25, 0.75, 0.1]),
        )
        .unwrap()
    }

    fn basis(d: usize, i: usize) -> DVector<f64> {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        e
    }

    fn probe() -> SequenceInput {
        SequenceInput::from_rows(&[vec![0.3, -0.1, 0.9, 0.2], vec![-1.0, 0.4, 0.0, 0.7]]).unwrap()
    }

    #[test]
    fn vq_reads_value_coordinates_and_counts() {
        let params = toy_model();
        let mut s = OracleSession::exact(Model::Attention(params.clone()));
        assert_eq!(s.query_count(), 0);
        let y = s.vq(&SequenceInput::single(&basis(4, 0))).unwrap();
        assert_eq!(y, 0.5);
        let x = probe();
        let a = s.vq(&x).unwrap();
        let b = s.vq(&x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(s.query_count(), 3);
        assert_eq!(a, attention_forward(&params, &x).unwrap());
    }

    #[test]
    fn protocols_are_enforced() {
        let mut exact = OracleSession::exact(Model::Attention(toy_model()));
        assert!(matches!(exact.avq(&probe(), 0.1), Err(Error::Protocol(_))));
        let mut approx =
            OracleSession::approximate(Model::Attention(toy_model()), NoisePolicy::Zero, 1e-3)
                .unwrap();
        assert!(matches!(approx.vq(&probe()), Err(Error::Protocol(_))));
        assert!(matches!(
            approx.avq(&probe(), 1e-4),
            Err(Error::ToleranceUnsatisfiable { .. })
        ));
        assert_eq!(approx.query_count(), 0);
        assert!(approx.avq(&probe(), 1e-3).is_ok());
        assert_eq!(approx.query_count(), 1);
    }

    #[test]
    fn zero_policy_is_exact() {
        let params = toy_model();
        let mut s =
            OracleSession::approximate(Model::Attention(params.clone()), NoisePolicy::Zero, 0.0)
                .unwrap();
        let x = probe();
        assert_eq!(s.avq(&x, 0.5).unwrap(), attention_forward(&params, &x).unwrap());
    }

    #[test]
    fn quantize_rounds_to_nearest_multiple() {
        // v = (0.234, ...): the one-row query on e_1 has true value 0.234.
        let params = AttentionParams::new(
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![0.234, 1.0]),
        )
        .unwrap();
        let mut s =
            OracleSession::approximate(Model::Attention(params), NoisePolicy::Quantize, 0.0)
                .unwrap();
        let y = s.avq(&SequenceInput::single(&basis(2, 0)), 0.1).unwrap();
        assert!((y - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hash_sign_is_deterministic_and_maximal() {
        let params = toy_model();
        let mut s = OracleSession::approximate(
            Model::Attention(params.clone()),
            NoisePolicy::HashSign { seed: 11 },
            0.0,
        )
        .unwrap();
        let x = probe();
        let a = s.avq(&x, 0.01).unwrap();
        let b = s.avq(&x, 0.01).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let err = (a - attention_forward(&params, &x).unwrap()).abs();
        assert!(err <= 0.01 && err > 0.0099);

        // A fresh session with the same seed agrees bit for bit.
        let mut t = OracleSession::approximate(
            Model::Attention(params),
            NoisePolicy::HashSign { seed: 11 },
            0.0,
        )
        .unwrap();
        assert_eq!(t.avq(&x, 0.01).unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn recording_captures_inputs() {
        let mut s = OracleSession::exact(Model::Attention(toy_model()));
        let mut rec = Recording::new(&mut s);
        rec.value(&probe()).unwrap();
        rec.value(&SequenceInput::single(&basis(4, 2))).unwrap();
        assert_eq!(rec.transcript().len(), 2);
        assert_eq!(rec.transcript()[1].value, 0.75);
        assert_eq!(rec.queries_issued(), 2);
    }

    fn policy_strategy() -> impl Strategy<Value = NoisePolicy> {
        prop_oneof![
            Just(NoisePolicy::Zero),
            Just(NoisePolicy::Quantize),
            any::<u64>().prop_map(|seed| NoisePolicy::HashSign { seed }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn avq_stays_within_tolerance(
            w in proptest::collection::vec(-3.0f64..3.0, 9),
            v in proptest::collection::vec(-1.0f64..1.0, 3),
            rows in proptest::collection::vec(-2.0f64..2.0, 3..15),
            tau_exp in -9.0f64..0.0,
            policy in policy_strategy(),
        ) {
            let n = rows.len() / 3;
            let x = SequenceInput::new(DMatrix::from_row_slice(n, 3, &rows[..3 * n])).unwrap();
            let params = AttentionParams::new(
                DMatrix::from_row_slice(3, 3, &w),
                DVector::from_vec(v),
            ).unwrap();
            let truth = attention_forward(&params, &x).unwrap();
            let tau = 10f64.powf(tau_exp);
            let mut s = OracleSession::approximate(Model::Attention(params), policy, 0.0).unwrap();
            let y = s.avq(&x, tau).unwrap();
            prop_assert!((y - truth).abs() <= tau);
            prop_assert_eq!(s.avq(&x, tau).unwrap().to_bits(), y.to_bits());
        }
    }
}
