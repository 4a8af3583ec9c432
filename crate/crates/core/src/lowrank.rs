//! Randomised extraction when `rank(W) <= r`, using `d + m` queries.
//!
//! Each two-row query `[(a + b)^T; b^T]` yields the rank-one measurement
//! `a^T W b`. With `m = ceil(C r 2d)` Gaussian pairs, nuclear-norm
//! minimisation recovers `W`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{
    build_probe_set, measure_logit, recover_score_matrix, recover_value_vector, LogitMeasurement,
    ProbeConfig, ProbeScheme,
};
use crate::oracle::ValueOracle;
use crate::report::RecoveryReport;
use crate::sensing::{solve_nuclear_min, RopSystem, SolverConfig};

/// Logits above this magnitude are treated as saturating the sigmoid when
/// deciding whether to shrink a probe before querying.
const SAFE_LOGIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankConfig {
    pub rank_bound: usize,
    /// Oversampling constant `C` in `m = ceil(C r 2d)`.
    pub oversampling: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub probe: ProbeConfig,
    /// Known bound on `||W||_F`; enables shrinking probes before they are issued.
    pub norm_bound: Option<f64>,
    /// Resample `a` when `|a.v| <= resample_threshold * ||a|| ||v||`.
    pub resample_threshold: f64,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        Self {
            rank_bound: 1,
            oversampling: 3.0,
            seed: 0,
            solver: SolverConfig::default(),
            probe: ProbeConfig::default(),
            norm_bound: None,
            resample_threshold: 1e-9,
        }
    }
}

impl LowRankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_bound == 0 {
            return Err(Error::InvalidInput("rank bound must be >= 1".into()));
        }
        if !(self.oversampling > 0.0) || !self.oversampling.is_finite() {
            return Err(Error::InvalidInput("oversampling constant must be positive".into()));
        }
        self.solver.validate()
    }

    /// Number of rank-one measurements for dimension `d`.
    pub fn measurements(&self, d: usize) -> usize {
        ((self.oversampling * self.rank_bound as f64 * 2.0 * d as f64).ceil() as usize).max(1)
    }
}

/// One rank-one measurement `a^T W b` from a single two-row query.
pub fn rop_probe_logit<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    v_hat: &DVector<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    config: &ProbeConfig,
) -> Result<LogitMeasurement> {
    measure_logit(oracle, v_hat, a, b, config)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Draws `m` sensing pairs from one seeded stream, so a smaller `m` with the
/// same seed yields a prefix of a larger draw.
pub fn draw_sensing_pairs(
    v_hat: &DVector<f64>,
    m: usize,
    config: &LowRankConfig,
) -> (Vec<(DVector<f64>, DVector<f64>)>, usize) {
    let d = v_hat.len();
    let v_norm = v_hat.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut resampled = 0;
    let pairs = (0..m)
        .map(|_| {
            let mut a = gaussian(&mut rng, d);
            while a.dot(v_hat).abs() <= config.resample_threshold * a.norm() * v_norm {
                a = gaussian(&mut rng, d);
                resampled += 1;
            }
            let b = gaussian(&mut rng, d);
            if let Some(bound) = config.norm_bound {
                let predicted = a.norm() * b.norm() * bound;
                if predicted > SAFE_LOGIT {
                    let shrink = (predicted / SAFE_LOGIT).log2().ceil().exp2();
                    a /= shrink;
                }
            }
            (a, b)
        })
        .collect();
    (pairs, resampled)
}

/// Value phase, then either `m` rank-one probes and a nuclear-norm solve, or
/// the dense exact algorithm when `m >= d^2`.
pub fn recover_lowrank<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    config: &LowRankConfig,
) -> Result<RecoveryReport> {
    config.validate()?;
    let start = Instant::now();
    let before = oracle.queries_issued();
    let d = oracle.dim();
    let m = config.measurements(d);

    let v_hat = recover_value_vector(oracle)?;
    if v_hat.amax() <= config.probe.zero_threshold {
        return Err(Error::NonIdentifiable);
    }

    if m >= d * d {
        let probes = build_probe_set(&v_hat, ProbeScheme::Deterministic, &config.probe)?;
        let phase = recover_score_matrix(oracle, &v_hat, &probes, &config.probe)?;
        let mut report = RecoveryReport::new(phase.score_matrix, v_hat);
        report.queries_used = oracle.queries_issued() - before;
        report.elapsed = start.elapsed();
        report.set("dense_fallback", 1.0);
        report.set("measurements", (d * d) as f64);
        report.set("probe_condition", phase.condition);
        report.set("probe_rescales", phase.rescales as f64);
        return Ok(report);
    }

    let (pairs, resampled) = draw_sensing_pairs(&v_hat, m, config);
    let mut logits = DVector::zeros(m);
    let mut rescales = 0;
    for (k, (a, b)) in pairs.iter().enumerate() {
        let measurement = rop_probe_logit(oracle, &v_hat, a, b, &config.probe)?;
        rescales += measurement.rescales;
        logits[k] = measurement.logit;
    }
    let system = RopSystem::new(&pairs, logits)?;
    let (w_hat, solver) = solve_nuclear_min(&system, &config.solver)?;
    let excess = excess_singular_ratio(&w_hat, config.rank_bound);

    let mut report = RecoveryReport::new(w_hat, v_hat);
    report.queries_used = oracle.queries_issued() - before;
    report.elapsed = start.elapsed();
    report.converged = solver.converged;
    report.set("dense_fallback", 0.0);
    report.set("measurements", m as f64);
    report.set("resampled_probes", resampled as f64);
    report.set("probe_rescales", rescales as f64);
    report.set("solver_iterations", solver.iterations as f64);
    report.set("solver_primal_residual", solver.primal_residual);
    report.set("solver_dual_residual", solver.dual_residual);
    report.set("solver_cg_iterations", solver.cg_iterations as f64);
    report.set("numerical_rank", solver.numerical_rank as f64);
    report.set("nuclear_norm", solver.nuclear_norm);
    report.set("excess_singular_ratio", excess);
    Ok(report)
}

/// `sigma_{r+1} / sigma_max`, or 0 when there is no singular value past `r`.
pub fn excess_singular_ratio(w: &DMatrix<f64>, r: usize) -> f64 {
    let mut sv: Vec<f64> = w.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    match (sv.first(), sv.get(r)) {
        (Some(&max), Some(&next)) if max > 0.0 => next / max,
        _ => 0.0,
    }
}
