//! Noise-tolerant extraction from an approximate value oracle.
//!
//! Probes are built so that every attention weight the learner inverts stays
//! inside `[sigmoid(-1/2), sigmoid(1/2)]`, where the inverse sigmoid is
//! 5-Lipschitz. With `a = 1/2` and `b = 1/W`, the probe
//! `[(b e_i + a e_j)^T; (a e_j)^T]` has logit `a b W_ij` and
//! `|a b W_ij| <= 1/2` whenever `||W||_F <= W`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::basis;
use crate::model::{logit, sigmoid, SequenceInput};
use crate::oracle::OracleSession;
use crate::report::RecoveryReport;

/// First-row offset of every entry probe.
pub const PROBE_A: f64 = 0.5;

/// Lower edge of the clipping interval, `sigmoid(-1/2)`.
pub fn clip_floor() -> f64 {
    sigmoid(-0.5)
}

/// Lipschitz constant of the inverse sigmoid on the clipping interval.
pub fn clip_lipschitz() -> f64 {
    let t = clip_floor();
    1.0 / (t * (1.0 - t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    /// Known bound `W >= 2` on `||W*||_F`.
    pub norm_bound: f64,
    /// Margin `mu` with `min_i |v*_i| >= mu`.
    pub margin: f64,
    pub eps_v: f64,
    pub eps_w: f64,
    /// Multiplies both scheduled tolerances; 1 follows the schedule.
    pub tau_scale: f64,
}

impl RobustConfig {
    pub fn new(norm_bound: f64, margin: f64, eps_v: f64, eps_w: f64) -> Result<Self> {
        let config = Self {
            norm_bound,
            margin,
            eps_v,
            eps_w,
            tau_scale: 1.0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_bound >= 2.0) || !self.norm_bound.is_finite() {
            return Err(Error::InvalidInput(format!(
                "norm bound must be >= 2, got {}",
                self.norm_bound
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidInput("margin must be positive".into()));
        }
        for (name, eps) in [("eps_v", self.eps_v), ("eps_w", self.eps_w)] {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must lie in (0, 1), got {eps}")));
            }
        }
        if !(self.tau_scale > 0.0) {
            return Err(Error::InvalidInput("tau scale must be positive".into()));
        }
        Ok(())
    }

    /// Second-row probe scale `b = 1/W`.
    pub fn probe_b(&self) -> f64 {
        1.0 / self.norm_bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSchedule {
    /// Tolerance for the `d` one-row value queries.
    pub tau_v: f64,
    /// Tolerance for the `d^2` two-row entry probes.
    pub tau_f: f64,
}

/// `tau_f = mu eps_W / (80 W^2 d)` and
/// `tau_v = min(mu / 2, mu eps_W / (80 W^2 d), eps_v / sqrt(d))`.
pub fn tolerance_schedule(config: &RobustConfig, d: usize) -> ToleranceSchedule {
    let d = d as f64;
    let w2 = config.norm_bound * config.norm_bound;
    let tau_f = config.margin * config.eps_w / (80.0 * w2 * d);
    let tau_v = (config.margin / 2.0).min(tau_f).min(config.eps_v / d.sqrt());
    ToleranceSchedule {
        tau_v: tau_v * config.tau_scale,
        tau_f: tau_f * config.tau_scale,
    }
}

/// Clips into `[sigmoid(-1/2), 1 - sigmoid(-1/2)]` and inverts the sigmoid.
/// The result lies in `[-1/2, 1/2]`.
pub fn clipped_logit(alpha_hat: f64) -> f64 {
    let lo = clip_floor();
    if alpha_hat.is_nan() {
        return 0.0;
    }
    let clipped = alpha_hat.clamp(lo, 1.0 - lo);
    logit(clipped).clamp(-0.5, 0.5)
}

/// `v_i = AVQ([e_i^T]; tau_v)`; `d` queries.
pub fn recover_value_vector_robust(
    session: &mut OracleSession,
    tau_v: f64,
) -> Result<DVector<f64>> {
    let d = session.dim();
    let mut v = DVector::zeros(d);
    for i in 0..d {
        v[i] = session.avq(&SequenceInput::single(&basis(d, i)), tau_v)?;
    }
    Ok(v)
}

/// One entry estimate, with the pre-clip attention weight kept for
/// instrumentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryEstimate {
    pub value: f64,
    pub alpha_hat: f64,
}

/// Estimates `W_ij` from one approximate query at tolerance `tau_f`.
pub fn estimate_entry(
    session: &mut OracleSession,
    v_hat: &DVector<f64>,
    i: usize,
    j: usize,
    tau_f: f64,
    config: &RobustConfig,
) -> Result<EntryEstimate> {
    let d = v_hat.len();
    let a = PROBE_A;
    let b = config.probe_b();
    let e_i = basis(d, i);
    let e_j = basis(d, j);
    let first = &e_i * b + &e_j * a;
    let second = &e_j * a;
    let y = session.avq(&SequenceInput::pair(&first, &second), tau_f)?;
    let alpha_hat = (y - a * v_hat[j]) / (b * v_hat[i]);
    Ok(EntryEstimate {
        value: clipped_logit(alpha_hat) / (a * b),
        alpha_hat,
    })
}

/// `d` one-row queries at `tau_v`, then `d^2` entry probes at `tau_f`.
pub fn recover_robust(
    session: &mut OracleSession,
    config: &RobustConfig,
) -> Result<RecoveryReport> {
    config.validate()?;
    let start = Instant::now();
    let before = session.query_count();
    let d = session.dim();
    let schedule = tolerance_schedule(config, d);
    let floor = session.tolerance();
    let tightest = schedule.tau_v.min(schedule.tau_f);
    if floor > tightest {
        return Err(Error::ToleranceUnsatisfiable {
            requested: tightest,
            floor,
        });
    }

    let v_hat = recover_value_vector_robust(session, schedule.tau_v)?;
    let lo = clip_floor();
    let mut clipped = 0usize;
    let mut w = DMatrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            let est = estimate_entry(session, &v_hat, i, j, schedule.tau_f, config)?;
            if est.alpha_hat < lo || est.alpha_hat > 1.0 - lo {
                clipped += 1;
            }
            w[(i, j)] = est.value;
        }
    }

    let mut report = RecoveryReport::new(w, v_hat);
    report.queries_used = session.query_count() - before;
    report.elapsed = start.elapsed();
    report.set("tau_v", schedule.tau_v);
    report.set("tau_f", schedule.tau_f);
    report.set("clipped_entries", clipped as f64);
    report.set("min_abs_value_estimate", report.value_vector.amin());
    Ok(report)
}
