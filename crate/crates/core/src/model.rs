//! Model families and their exact forward passes.
//!
//! Every model maps a sequence `X` of `N >= 1` row vectors in `R^d` to a
//! scalar. The last row acts as the attention query token.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A variable-length sequence of `N` row vectors, stored as an `N x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    rows: DMatrix<f64>,
}

impl SequenceInput {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidInput("sequence must have at least one row".into()));
        }
        if rows.ncols() == 0 {
            return Err(Error::InvalidInput("rows must have dimension >= 1".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("sequence must have at least one row".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("all rows must share one dimension".into()));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    /// A one-row sequence `[x^T]`.
    pub fn single(x: &DVector<f64>) -> Self {
        Self {
            rows: DMatrix::from_fn(1, x.len(), |_, j| x[j]),
        }
    }

    /// A two-row sequence `[first^T; second^T]`.
    pub fn pair(first: &DVector<f64>, second: &DVector<f64>) -> Self {
        assert_eq!(first.len(), second.len(), "pair rows must share a dimension");
        Self {
            rows: DMatrix::from_fn(2, first.len(), |i, j| if i == 0 { first[j] } else { second[j] }),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    pub fn negated(&self) -> Self {
        Self { rows: -&self.rows }
    }

    /// Exact bit-level encoding: `N`, `d`, then every entry in row-major order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let (n, d) = self.rows.shape();
        let mut out = Vec::with_capacity(16 + 8 * n * d);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for i in 0..n {
            for j in 0..d {
                out.extend_from_slice(&self.rows[(i, j)].to_bits().to_le_bytes());
            }
        }
        out
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Shape(format!(
                "input rows have dimension {}, model expects {d}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Single-head attention parameters `(W, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub score_matrix: DMatrix<f64>,
    pub value_vector: DVector<f64>,
}

impl AttentionParams {
    pub fn new(score_matrix: DMatrix<f64>, value_vector: DVector<f64>) -> Result<Self> {
        let d = value_vector.len();
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be >= 1".into()));
        }
        if score_matrix.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "score matrix is {:?}, value vector has length {d}",
                score_matrix.shape()
            )));
        }
        Ok(Self {
            score_matrix,
            value_vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.value_vector.len()
    }
}

/// One-layer single-head Transformer parameters `(W, A, w_o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub score_matrix: DMatrix<f64>,
    pub hidden_matrix: DMatrix<f64>,
    pub output_vector: DVector<f64>,
}

impl TransformerParams {
    pub fn new(
        score_matrix: DMatrix<f64>,
        hidden_matrix: DMatrix<f64>,
        output_vector: DVector<f64>,
    ) -> Result<Self> {
        let d = score_matrix.nrows();
        let m = output_vector.len();
        if d == 0 || m == 0 {
            return Err(Error::InvalidInput("dimensions must be >= 1".into()));
        }
        if score_matrix.ncols() != d {
            return Err(Error::Shape("score matrix must be square".into()));
        }
        if hidden_matrix.shape() != (d, m) {
            return Err(Error::Shape(format!(
                "hidden matrix is {:?}, expected ({d}, {m})",
                hidden_matrix.shape()
            )));
        }
        Ok(Self {
            score_matrix,
            hidden_matrix,
            output_vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.score_matrix.nrows()
    }

    pub fn hidden_width(&self) -> usize {
        self.output_vector.len()
    }

    /// The merged value vector `A w_o` seen by the attention block.
    pub fn merged_value_vector(&self) -> DVector<f64> {
        &self.hidden_matrix * &self.output_vector
    }
}

/// Multi-head attention in merged form: a sum of `H` single heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<AttentionParams>,
}

impl MultiHeadParams {
    pub fn new(heads: Vec<AttentionParams>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::InvalidInput("multi-head model needs at least one head".into()));
        };
        let d = first.dim();
        if heads.iter().any(|h| h.dim() != d) {
            return Err(Error::Shape("all heads must share the same dimension".into()));
        }
        Ok(Self { heads })
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Attention,
    Transformer,
    Multihead,
}

/// Any of the supported model families.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Attention(AttentionParams),
    Transformer(TransformerParams),
    MultiHead(MultiHeadParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Attention(_) => ModelKind::Attention,
            Model::Transformer(_) => ModelKind::Transformer,
            Model::MultiHead(_) => ModelKind::Multihead,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Attention(p) => p.dim(),
            Model::Transformer(p) => p.dim(),
            Model::MultiHead(p) => p.dim(),
        }
    }

    pub fn forward(&self, x: &SequenceInput) -> Result<f64> {
        match self {
            Model::Attention(p) => attention_forward(p, x),
            Model::Transformer(p) => transformer_forward(p, x),
            Model::MultiHead(p) => multihead_forward(p, x),
        }
    }

    /// Rejects non-finite parameters.
    pub fn validate(&self) -> Result<()> {
        let finite = |m: &[f64]| m.iter().all(|x| x.is_finite());
        let ok = match self {
            Model::Attention(p) => {
                finite(p.score_matrix.as_slice()) && finite(p.value_vector.as_slice())
            }
            Model::Transformer(p) => {
                finite(p.score_matrix.as_slice())
                    && finite(p.hidden_matrix.as_slice())
                    && finite(p.output_vector.as_slice())
            }
            Model::MultiHead(p) => p.heads.iter().all(|h| {
                finite(h.score_matrix.as_slice()) && finite(h.value_vector.as_slice())
            }),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("model parameters must be finite".into()))
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid, `log(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Softmax with max-subtraction.
pub fn softmax(scores: &DVector<f64>) -> Result<DVector<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("softmax input must be finite".into()));
    }
    let max = scores.max();
    let exps = scores.map(|s| (s - max).exp());
    let total = exps.sum();
    Ok(exps / total)
}

/// Scores `s_i = x_i^T W x_N`.
pub fn attention_scores(params: &AttentionParams, x: &SequenceInput) -> Result<DVector<f64>> {
    x.check_dim(params.dim())?;
    Ok(scores_for(&params.score_matrix, x))
}

fn scores_for(score_matrix: &DMatrix<f64>, x: &SequenceInput) -> DVector<f64> {
    let rows = x.rows();
    let last = rows.row(rows.nrows() - 1).transpose();
    let projected = score_matrix * last;
    rows * projected
}

fn attention_weights(score_matrix: &DMatrix<f64>, x: &SequenceInput) -> Result<DVector<f64>> {
    softmax(&scores_for(score_matrix, x))
}

pub fn attention_forward(params: &AttentionParams, x: &SequenceInput) -> Result<f64> {
    x.check_dim(params.dim())?;
    let alpha = attention_weights(&params.score_matrix, x)?;
    let values = x.rows() * &params.value_vector;
    Ok(alpha.dot(&values))
}

pub fn transformer_forward(params: &TransformerParams, x: &SequenceInput) -> Result<f64> {
    x.check_dim(params.dim())?;
    let alpha = attention_weights(&params.score_matrix, x)?;
    // z = alpha^T X A, as a column vector of length m.
    let context = x.rows().transpose() * alpha;
    let z = params.hidden_matrix.transpose() * context;
    Ok(z.iter()
        .zip(params.output_vector.iter())
        .map(|(zi, wi)| wi * relu(*zi))
        .sum())
}

pub fn multihead_forward(params: &MultiHeadParams, x: &SequenceInput) -> Result<f64> {
    if params.heads.is_empty() {
        return Err(Error::InvalidInput("multi-head model needs at least one head".into()));
    }
    params
        .heads
        .iter()
        .map(|h| attention_forward(h, x))
        .sum()
}
