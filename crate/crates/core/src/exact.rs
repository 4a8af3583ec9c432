//! Exact extraction of `(W, v)` from `d + d^2` exact value queries.
//!
//! One-row queries `[e_i^T]` read off `v` directly. For column `j`, the
//! two-row query `[(u + e_j)^T; e_j^T]` puts attention weight
//! `sigmoid(u^T w_j)` on its first row, and the answer is
//! `v_j + sigmoid(u^T w_j) (u . v)`. Inverting the sigmoid gives one linear
//! equation per probe `u`; `d` independent probes pin down the column.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, LU, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logit, SequenceInput};
use crate::oracle::ValueOracle;
use crate::report::RecoveryReport;

/// Numerical policy for turning two-row answers into logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// `|x| <= zero_threshold` counts as zero for value coordinates and overlaps.
    pub zero_threshold: f64,
    /// Attention weights are clamped into `(clamp_eps, 1 - clamp_eps)` before the logit.
    pub clamp_eps: f64,
    /// A weight this close to 0 or 1 triggers probe rescaling.
    pub saturation: f64,
    /// A weight outside `[-slack, 1 + slack]` cannot come from an attention model.
    pub consistency_slack: f64,
    pub max_rescales: u32,
    /// Largest accepted condition estimate for the probe matrix.
    pub max_condition: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            zero_threshold: 1e-12,
            clamp_eps: 1e-15,
            saturation: 1e-9,
            consistency_slack: 1e-9,
            max_rescales: 48,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum ProbeScheme {
    /// `u_l = e_l`, or `e_l + e_p` where `v_l` vanishes.
    Deterministic,
    /// i.i.d. standard normal probes, resampled until usable.
    Gaussian { seed: u64 },
}

impl Default for ProbeScheme {
    fn default() -> Self {
        ProbeScheme::Deterministic
    }
}

/// `d` linearly independent probes, each with nonzero overlap with `v`.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub probes: Vec<DVector<f64>>,
    /// Index of a nonzero value coordinate (0-based).
    pub pivot: usize,
    pub scheme: ProbeScheme,
}

impl ProbeSet {
    /// The probe matrix `Z` with the probes as rows.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.probes.len();
        DMatrix::from_fn(d, d, |l, k| self.probes[l][k])
    }
}

/// A logit recovered from one probe, plus bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitMeasurement {
    pub logit: f64,
    /// Pre-clamp attention weight of the last query issued.
    pub alpha: f64,
    /// How many times the probe was halved because the weight saturated.
    pub rescales: u32,
}

pub(crate) fn basis(d: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(d);
    e[i] = 1.0;
    e
}

/// Phase one: `v_i = VQ([e_i^T])`, `d` queries.
pub fn recover_value_vector<O: ValueOracle + ?Sized>(oracle: &mut O) -> Result<DVector<f64>> {
    let d = oracle.dim();
    let mut v = DVector::zeros(d);
    for i in 0..d {
        v[i] = oracle.value(&SequenceInput::single(&basis(d, i)))?;
    }
    Ok(v)
}

fn condition_number(z: &DMatrix<f64>) -> f64 {
    let sv = z.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn build_probe_set(
    v_hat: &DVector<f64>,
    scheme: ProbeScheme,
    config: &ProbeConfig,
) -> Result<ProbeSet> {
    let d = v_hat.len();
    let threshold = config.zero_threshold;
    let pivot = v_hat.iamax();
    if d == 0 || v_hat[pivot].abs() <= threshold {
        return Err(Error::NonIdentifiable);
    }
    match scheme {
        ProbeScheme::Deterministic => {
            let probes = (0..d)
                .map(|l| {
                    let mut u = basis(d, l);
                    if v_hat[l].abs() <= threshold {
                        u[pivot] += 1.0;
                    }
                    u
                })
                .collect();
            Ok(ProbeSet {
                probes,
                pivot,
                scheme,
            })
        }
        ProbeScheme::Gaussian { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..16 {
                let probes: Vec<DVector<f64>> = (0..d)
                    .map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)))
                    .collect();
                if probes.iter().any(|u| u.dot(v_hat).abs() <= threshold) {
                    continue;
                }
                let set = ProbeSet {
                    probes,
                    pivot,
                    scheme,
                };
                if condition_number(&set.matrix()) <= config.max_condition {
                    return Ok(set);
                }
            }
            Err(Error::ProbeConstruction(
                "no usable Gaussian probe set after 16 draws".into(),
            ))
        }
    }
}

/// Issues `[(a + b)^T; b^T]` and returns `a^T W b`.
///
/// The first-row weight is `sigmoid(a^T W b)` and the answer is
/// `b.v + sigmoid(a^T W b) (a.v)`. If the weight saturates, `a` is halved
/// and the query reissued; each reissue costs one extra query.
pub fn measure_logit<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    v_hat: &DVector<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    config: &ProbeConfig,
) -> Result<LogitMeasurement> {
    let overlap = a.dot(v_hat);
    if overlap.abs() <= config.zero_threshold {
        return Err(Error::ProbeRejected { overlap });
    }
    let offset = b.dot(v_hat);
    let mut scale = 1.0f64;
    let mut rescales = 0;
    loop {
        let a_scaled = a / scale;
        let first = &a_scaled + b;
        let y = oracle.value(&SequenceInput::pair(&first, b))?;
        let alpha = (y - offset) / (overlap / scale);
        if !alpha.is_finite()
            || alpha < -config.consistency_slack
            || alpha > 1.0 + config.consistency_slack
        {
            return Err(Error::OracleInconsistency { alpha });
        }
        let saturated = alpha < config.saturation || alpha > 1.0 - config.saturation;
        if saturated && rescales < config.max_rescales {
            scale *= 2.0;
            rescales += 1;
            continue;
        }
        let clamped = alpha.clamp(config.clamp_eps, 1.0 - config.clamp_eps);
        return Ok(LogitMeasurement {
            logit: scale * logit(clamped),
            alpha,
            rescales,
        });
    }
}

/// One probe for column `j`: returns `u^T w_j` via `[(u + e_j)^T; e_j^T]`.
pub fn measure_column_logit<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    v_hat: &DVector<f64>,
    j: usize,
    u: &DVector<f64>,
    config: &ProbeConfig,
) -> Result<LogitMeasurement> {
    let e_j = basis(v_hat.len(), j);
    measure_logit(oracle, v_hat, u, &e_j, config)
}

/// Recovered score matrix plus probe diagnostics.
#[derive(Debug, Clone)]
pub struct ScoreMatrixRecovery {
    pub score_matrix: DMatrix<f64>,
    pub condition: f64,
    pub rescales: u32,
}

/// Phase two: `d^2` two-row queries, one LU factorisation of `Z`.
pub fn recover_score_matrix<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    v_hat: &DVector<f64>,
    probes: &ProbeSet,
    config: &ProbeConfig,
) -> Result<ScoreMatrixRecovery> {
    let d = v_hat.len();
    if probes.probes.len() != d || probes.probes.iter().any(|u| u.len() != d) {
        return Err(Error::Shape("probe set does not match the value vector".into()));
    }
    let z = probes.matrix();
    let condition = condition_number(&z);
    if !(condition <= config.max_condition) {
        return Err(Error::IllConditioned { condition });
    }
    let lu: LU<f64, Dyn, Dyn> = z.lu();

    let mut w = DMatrix::zeros(d, d);
    let mut rescales = 0;
    for j in 0..d {
        let mut t = DVector::zeros(d);
        for (l, u) in probes.probes.iter().enumerate() {
            let m = measure_column_logit(oracle, v_hat, j, u, config)?;
            rescales += m.rescales;
            t[l] = m.logit;
        }
        let column = lu
            .solve(&t)
            .ok_or(Error::IllConditioned { condition })?;
        w.set_column(j, &column);
    }
    Ok(ScoreMatrixRecovery {
        score_matrix: w,
        condition,
        rescales,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactConfig {
    pub scheme: ProbeScheme,
    pub probe: ProbeConfig,
}

/// Full two-phase extraction; `d + d^2` queries when no probe saturates.
pub fn recover<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    config: &ExactConfig,
) -> Result<RecoveryReport> {
    let start = Instant::now();
    let before = oracle.queries_issued();
    let v_hat = recover_value_vector(oracle)?;
    let probes = build_probe_set(&v_hat, config.scheme, &config.probe)?;
    let phase = recover_score_matrix(oracle, &v_hat, &probes, &config.probe)?;

    let mut report = RecoveryReport::new(phase.score_matrix, v_hat);
    report.queries_used = oracle.queries_issued() - before;
    report.elapsed = start.elapsed();
    report.set("probe_condition", phase.condition);
    report.set("probe_rescales", phase.rescales as f64);
    report.set("pivot_index", probes.pivot as f64);
    Ok(report)
}
