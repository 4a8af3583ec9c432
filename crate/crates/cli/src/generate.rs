//! Seeded ground-truth models that satisfy the hypotheses of each algorithm.

use attnprobe_core::{
    AttentionParams, Error as CoreError, Model, ModelKind, MultiHeadParams, TransformerParams,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::seeds::derive_seed;

/// Entry range of unconstrained score matrices.
pub const ENTRY_BOUND: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: ModelKind,
    pub d: usize,
    /// Hidden width of a Transformer FFN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Score matrices are built as `L R^T` with `L, R` of this width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Score matrices are rescaled to this Frobenius norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
    /// Value entries satisfy `|v_i| >= margin` with `||v|| <= 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default)]
    pub zero_value: bool,
    pub seed: u64,
}

impl GenSpec {
    pub fn attention(d: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Attention,
            d,
            hidden_width: None,
            heads: None,
            rank: None,
            norm_bound: None,
            margin: None,
            zero_value: false,
            seed,
        }
    }

    fn check(&self) -> CliResult<()> {
        let infeasible = |msg: String| Err(CliError::Core(CoreError::ConstraintInfeasible(msg)));
        if self.d == 0 {
            return Err(CliError::Invalid("dimension must be >= 1".into()));
        }
        if let Some(r) = self.rank {
            if r == 0 || r > self.d {
                return infeasible(format!("rank {r} is not in 1..={}", self.d));
            }
        }
        if let Some(w) = self.norm_bound {
            if !(w > 0.0) || !w.is_finite() {
                return infeasible(format!("norm bound {w} must be positive"));
            }
        }
        if let Some(mu) = self.margin {
            if !(mu > 0.0) {
                return infeasible(format!("margin {mu} must be positive"));
            }
            if mu * (self.d as f64).sqrt() > 1.0 {
                return infeasible(format!(
                    "margin {mu} with d = {} forces ||v|| > 1",
                    self.d
                ));
            }
            if self.zero_value {
                return infeasible("a zero value vector has no margin".into());
            }
        }
        match self.kind {
            ModelKind::Transformer if self.hidden_width.unwrap_or(0) == 0 => {
                Err(CliError::Invalid("transformer models need a hidden width".into()))
            }
            ModelKind::Multihead if self.heads.unwrap_or(0) == 0 => {
                Err(CliError::Invalid("multi-head models need a head count".into()))
            }
            _ => Ok(()),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn score_matrix(spec: &GenSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = spec.d;
    let w = match spec.rank {
        Some(r) => gaussian(rng, d, r) * gaussian(rng, d, r).transpose(),
        None => DMatrix::from_fn(d, d, |_, _| rng.random_range(-ENTRY_BOUND..=ENTRY_BOUND)),
    };
    match spec.norm_bound {
        Some(bound) if w.norm() > 0.0 => &w * (bound / w.norm()),
        _ => w,
    }
}

fn value_vector(spec: &GenSpec, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = spec.d;
    if spec.zero_value {
        return DVector::zeros(d);
    }
    match spec.margin {
        Some(mu) => {
            let cap = 1.0 / (d as f64).sqrt();
            DVector::from_fn(d, |_, _| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * (mu + (cap - mu) * rng.random::<f64>())
            })
        }
        None => loop {
            let v = gaussian(rng, d, 1).column(0).into_owned();
            if v.norm() > 0.0 {
                break v.normalize();
            }
        },
    }
}

pub fn generate(spec: &GenSpec) -> CliResult<Model> {
    spec.check()?;
    let rng = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, name));
    let model = match spec.kind {
        ModelKind::Attention => Model::Attention(AttentionParams::new(
            score_matrix(spec, &mut rng("score")),
            value_vector(spec, &mut rng("value")),
        )?),
        ModelKind::Transformer => {
            let m = spec.hidden_width.unwrap_or(0);
            let mut hidden = rng("hidden");
            let a = gaussian(&mut hidden, spec.d, m);
            let w_o = gaussian(&mut rng("output"), m, 1).column(0).into_owned();
            Model::Transformer(TransformerParams::new(score_matrix(spec, &mut rng("score")), a, w_o)?)
        }
        ModelKind::Multihead => {
            let heads = (0..spec.heads.unwrap_or(0))
                .map(|h| {
                    let w = score_matrix(spec, &mut rng(&format!("score-{h}")));
                    let v = value_vector(spec, &mut rng(&format!("value-{h}")));
                    AttentionParams::new(w, v)
                })
                .collect::<attnprobe_core::Result<Vec<_>>>()?;
            Model::MultiHead(MultiHeadParams::new(heads)?)
        }
    };
    Ok(model)
}

/// Numerical rank with relative singular value cutoff `1e-10`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > 1e-10 * top).count()
}

/// One-line description of a generated model.
pub fn summary(model: &Model) -> String {
    let attention = |p: &AttentionParams| {
        format!(
            "||W||_F={:.6} rank={} ||v||={:.6} min|v_i|={:.6}",
            p.score_matrix.norm(),
            numerical_rank(&p.score_matrix),
            p.value_vector.norm(),
            p.value_vector.amin()
        )
    };
    match model {
        Model::Attention(p) => format!("attention d={} {}", p.dim(), attention(p)),
        Model::Transformer(p) => format!(
            "transformer d={} m={} ||W||_F={:.6} ||A w_o||={:.6}",
            p.dim(),
            p.hidden_width(),
            p.score_matrix.norm(),
            p.merged_value_vector().norm()
        ),
        Model::MultiHead(p) => {
            let mut s = format!("multihead d={} H={}", p.dim(), p.num_heads());
            for (h, head) in p.heads.iter().enumerate() {
                s.push_str(&format!("\n  head {h}: {}", attention(head)));
            }
            s
        }
    }
}
