//! Reference learner for bias-free two-layer ReLU networks
//! `x -> w_o^T ReLU(x^T A)`.
//!
//! Assumes `m <= d`, nonzero pairwise non-parallel columns and nonzero output
//! weights. Every hidden unit contributes a hyperplane through the origin.
//! Random lines reveal where the restriction of the oracle bends; the gradient
//! jump across a bend gives the hyperplane normal. Signs and magnitudes come
//! from a least-squares fit against the ReLU feature map.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::relu;
use crate::transformer::{FfnLearner, FfnLearnerResult, ScalarFunctionOracle};

pub const EQUIVALENCE_NOTE: &str = "hidden units are determined up to permutation and \
positive rescaling (c a_j, w_j / c); columns are reported with unit norm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfnConfig {
    pub grid_points: usize,
    /// Lines are sampled on `t in [-t_range, t_range]`.
    pub t_range: f64,
    /// Relative threshold on second differences and slope changes.
    pub threshold: f64,
    /// Bisection stops below this interval width.
    pub resolution: f64,
    /// Finite-difference step.
    pub step: f64,
    pub lines_per_unit: usize,
    pub dedupe_cosine: f64,
    /// Largest offset from a bend at which gradients are taken.
    pub max_offset: f64,
    /// Relative residual allowed in the final fit.
    pub fit_tolerance: f64,
    pub seed: u64,
}

impl Default for FfnConfig {
    fn default() -> Self {
        Self {
            grid_points: 64,
            t_range: 4.0,
            threshold: 1e-6,
            resolution: 1e-10,
            step: 1e-5,
            lines_per_unit: 50,
            dedupe_cosine: 1.0 - 1e-6,
            max_offset: 1e-2,
            fit_tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceFfnLearner {
    pub config: FfnConfig,
}

impl ReferenceFfnLearner {
    pub fn new(config: FfnConfig) -> Self {
        Self { config }
    }
}

struct Line<'a> {
    oracle: &'a mut dyn ScalarFunctionOracle,
    p: DVector<f64>,
    q: DVector<f64>,
}

impl Line<'_> {
    fn point(&self, t: f64) -> DVector<f64> {
        &self.p + &self.q * t
    }

    fn at(&mut self, t: f64) -> Result<f64> {
        let x = self.point(t);
        self.oracle.eval(&x)
    }
}

struct Tolerances {
    value: f64,
    slope: f64,
}

fn locate(
    line: &mut Line<'_>,
    cfg: &FfnConfig,
    tol: &Tolerances,
    (a, fa): (f64, f64),
    (b, fb): (f64, f64),
    depth: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    let h = cfg.step.min((b - a) / 4.0);
    let sa = (line.at(a + h)? - fa) / h;
    let sb = (fb - line.at(b - h)?) / h;
    if (sa - sb).abs() <= tol.slope {
        return Ok(());
    }
    if b - a < cfg.resolution || depth > 80 {
        out.push(0.5 * (a + b));
        return Ok(());
    }

    // Try the single-bend hypothesis: two lines meeting inside (a, b).
    let t = (fb - fa + sa * a - sb * b) / (sa - sb);
    if t > a && t < b {
        let left = |s: f64| fa + sa * (s - a);
        let right = |s: f64| fb + sb * (s - b);
        let ok = (line.at(t)? - left(t)).abs() <= tol.value
            && (line.at(0.5 * (a + t))? - left(0.5 * (a + t))).abs() <= tol.value
            && (line.at(0.5 * (t + b))? - right(0.5 * (t + b))).abs() <= tol.value;
        if ok {
            out.push(t);
            return Ok(());
        }
    }

    let c = 0.5 * (a + b);
    let fc = line.at(c)?;
    locate(line, cfg, tol, (a, fa), (c, fc), depth + 1, out)?;
    locate(line, cfg, tol, (c, fc), (b, fb), depth + 1, out)
}

/// Bends of `t -> f(p + t q)` on the sampling window, sorted.
fn find_bends(line: &mut Line<'_>, cfg: &FfnConfig) -> Result<(Vec<f64>, f64)> {
    let n = cfg.grid_points.max(3);
    let ts: Vec<f64> = (0..n)
        .map(|k| -cfg.t_range + 2.0 * cfg.t_range * k as f64 / (n - 1) as f64)
        .collect();
    let values = ts.iter().map(|&t| line.at(t)).collect::<Result<Vec<_>>>()?;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok((Vec::new(), 0.0));
    }
    let tol = Tolerances {
        value: cfg.threshold * scale,
        slope: cfg.threshold * scale / cfg.t_range,
    };

    let mut windows: Vec<(usize, usize)> = Vec::new();
    for k in 1..n - 1 {
        let second = values[k - 1] - 2.0 * values[k] + values[k + 1];
        if second.abs() > tol.value {
            match windows.last_mut() {
                Some(w) if w.1 >= k - 1 => w.1 = k + 1,
                _ => windows.push((k - 1, k + 1)),
            }
        }
    }

    let mut bends = Vec::new();
    for (lo, hi) in windows {
        locate(
            line,
            cfg,
            &tol,
            (ts[lo], values[lo]),
            (ts[hi], values[hi]),
            0,
            &mut bends,
        )?;
    }
    bends.sort_by(f64::total_cmp);
    bends.dedup_by(|b, a| (*b - *a).abs() < 1e3 * cfg.resolution);
    Ok((bends, scale))
}

/// Central-difference gradient, or `None` when `x` is too close to a bend for
/// `f(x) = g.x` to hold.
fn gradient(
    oracle: &mut dyn ScalarFunctionOracle,
    x: &DVector<f64>,
    cfg: &FfnConfig,
) -> Result<Option<DVector<f64>>> {
    let d = x.len();
    let h = cfg.step;
    let mut g = DVector::zeros(d);
    for i in 0..d {
        let mut plus = x.clone();
        plus[i] += h;
        let mut minus = x.clone();
        minus[i] -= h;
        g[i] = (oracle.eval(&plus)? - oracle.eval(&minus)?) / (2.0 * h);
    }
    let fx = oracle.eval(x)?;
    let slack = cfg.threshold * (fx.abs() + g.norm() * x.norm()).max(f64::MIN_POSITIVE);
    Ok(((fx - g.dot(x)).abs() <= slack).then_some(g))
}

fn features(directions: &[DVector<f64>], signs: &[f64], points: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), directions.len() * signs.len(), |r, c| {
        let j = c / signs.len();
        let s = signs[c % signs.len()];
        relu(s * directions[j].dot(&points[r]))
    })
}

fn least_squares(phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = phi.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(y, eps).map_err(|e| Error::Numerical(e.to_string()))
}

impl FfnLearner for ReferenceFfnLearner {
    fn learn(
        &mut self,
        oracle: &mut dyn ScalarFunctionOracle,
        hidden_width: usize,
    ) -> Result<FfnLearnerResult> {
        let cfg = self.config;
        let d = oracle.dim();
        let m = hidden_width;
        if m == 0 {
            return Err(Error::InvalidInput("hidden width must be >= 1".into()));
        }
        if m > d {
            return Err(Error::UnsupportedConfig(format!(
                "reference learner needs hidden width <= d, got m = {m}, d = {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gaussian = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));

        let mut directions: Vec<DVector<f64>> = Vec::new();
        let budget = cfg.lines_per_unit * m;
        let mut lines = 0;
        while directions.len() < m && lines < budget {
            lines += 1;
            let p = gaussian(&mut rng);
            let q = gaussian(&mut rng).normalize();
            let mut line = Line { oracle: &mut *oracle, p, q };
            let (bends, _) = find_bends(&mut line, &cfg)?;
            let Line { p, q, .. } = line;

            for (k, &t) in bends.iter().enumerate() {
                let prev = if k == 0 { -cfg.t_range } else { bends[k - 1] };
                let next = bends.get(k + 1).copied().unwrap_or(cfg.t_range);
                let gap = (t - prev).min(next - t);
                let delta = cfg.max_offset.min(0.25 * gap);
                let (Some(g_plus), Some(g_minus)) = (
                    gradient(oracle, &(&p + &q * (t + delta)), &cfg)?,
                    gradient(oracle, &(&p + &q * (t - delta)), &cfg)?,
                ) else {
                    continue;
                };
                let jump = g_plus - &g_minus;
                let size = jump.norm();
                if size <= cfg.threshold * (g_minus.norm() + size) {
                    continue;
                }
                let dir = jump / size;
                if directions.iter().all(|u| u.dot(&dir).abs() <= cfg.dedupe_cosine) {
                    directions.push(dir);
                    if directions.len() == m {
                        break;
                    }
                }
            }
        }
        if directions.len() < m {
            return Err(Error::LearnerFailure(format!(
                "found {} of {m} hyperplanes within {budget} lines",
                directions.len()
            )));
        }

        let count = 8 * m + 8;
        let points: Vec<DVector<f64>> = (0..count).map(|_| gaussian(&mut rng)).collect();
        let y = DVector::from_iterator(
            count,
            points.iter().map(|x| oracle.eval(x)).collect::<Result<Vec<_>>>()?,
        );
        let scale = y.amax().max(f64::MIN_POSITIVE);

        // Both orientations per direction, then keep the dominant one.
        let both = least_squares(&features(&directions, &[1.0, -1.0], &points), &y)?;
        let mut signs = vec![1.0; m];
        let mut ambiguous = Vec::new();
        for j in 0..m {
            let (bp, bm) = (both[2 * j].abs(), both[2 * j + 1].abs());
            if (bp - bm).abs() <= 1e-6 * bp.max(bm) {
                ambiguous.push(j);
            } else if bm > bp {
                signs[j] = -1.0;
            }
        }
        if ambiguous.len() > 12 {
            return Err(Error::LearnerFailure("too many orientation ties".into()));
        }

        for pattern in 0u32..(1 << ambiguous.len()) {
            for (bit, &j) in ambiguous.iter().enumerate() {
                signs[j] = if pattern >> bit & 1 == 0 { 1.0 } else { -1.0 };
            }
            let oriented: Vec<DVector<f64>> =
                directions.iter().zip(&signs).map(|(u, s)| u * *s).collect();
            let phi = features(&oriented, &[1.0], &points);
            let weights = least_squares(&phi, &y)?;
            let residual = (&phi * &weights - &y).amax();
            if residual <= cfg.fit_tolerance * scale {
                let hidden = DMatrix::from_columns(&oriented);
                return Ok(FfnLearnerResult {
                    hidden_matrix: hidden,
                    output_vector: weights,
                    equivalence_class_note: EQUIVALENCE_NOTE.into(),
                });
            }
        }
        Err(Error::LearnerFailure(
            "ReLU feature fit does not reproduce the oracle".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Net {
        a: DMatrix<f64>,
        w: DVector<f64>,
        calls: u64,
    }

    impl Net {
        fn new(a: DMatrix<f64>, w: DVector<f64>) -> Self {
            Self { a, w, calls: 0 }
        }

        fn value(&self, x: &DVector<f64>) -> f64 {
            let z = self.a.transpose() * x;
            z.iter().zip(self.w.iter()).map(|(z, w)| w * relu(*z)).sum()
        }
    }

    impl ScalarFunctionOracle for Net {
        fn dim(&self) -> usize {
            self.a.nrows()
        }

        fn eval(&mut self, x: &DVector<f64>) -> Result<f64> {
            self.calls += 1;
            Ok(self.value(x))
        }

        fn queries_issued(&self) -> u64 {
            self.calls
        }
    }

    fn max_disagreement(net: &Net, learned: &FfnLearnerResult, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = net.dim();
        (0..1000)
            .map(|_| {
                let x = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                (net.value(&x) - learned.eval(&x)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_ramp() {
        let mut net = Net::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DVector::from_element(1, 2.0));
        let learned = ReferenceFfnLearner::default().learn(&mut net, 1).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert!((learned.eval(&e1) - 2.0).abs() < 1e-9);
        assert!(learned.eval(&-e1).abs() < 1e-9);
        assert!((learned.hidden_matrix.column(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_columns() {
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let mut net = Net::new(a, DVector::from_vec(vec![1.5, -0.7]));
        let learned = ReferenceFfnLearner::default().learn(&mut net, 2).unwrap();
        assert!(max_disagreement(&net, &learned, 1) <= 1e-6);
    }

    #[test]
    fn random_networks() {
        let mut ok = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = DMatrix::from_fn(5, 3, |_, _| StandardNormal.sample(&mut rng));
            let w = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let mut net = Net::new(a, w);
            let learner = &mut ReferenceFfnLearner::new(FfnConfig { seed, ..Default::default() });
            if let Ok(learned) = learner.learn(&mut net, 3) {
                if max_disagreement(&net, &learned, seed) <= 1e-6 {
                    ok += 1;
                }
            }
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn even_network_with_cancelling_columns() {
        // a1 + a2 + a3 = 0, so the function is even and A w_o = 0.
        let a = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, -0.5, 0.8, 0.0, -0.5, -0.8, 0.0]);
        let mut net = Net::new(a, DVector::from_element(3, 1.0));
        let learned = ReferenceFfnLearner::default().learn(&mut net, 3).unwrap();
        assert!(max_disagreement(&net, &learned, 2) <= 1e-6);
    }

    #[test]
    fn wider_than_input_is_unsupported() {
        let mut net = Net::new(DMatrix::identity(2, 3), DVector::from_element(3, 1.0));
        assert!(matches!(
            ReferenceFfnLearner::default().learn(&mut net, 3),
            Err(Error::UnsupportedConfig(_))
        ));
    }

    #[test]
    fn silent_unit_is_a_learner_failure() {
        let mut net = Net::new(DMatrix::identity(3, 2), DVector::from_vec(vec![1.0, 0.0]));
        let cfg = FfnConfig {
            lines_per_unit: 3,
            ..Default::default()
        };
        assert!(matches!(
            ReferenceFfnLearner::new(cfg).learn(&mut net, 2),
            Err(Error::LearnerFailure(_))
        ));
    }
}
