//! Extraction of a one-layer single-head Transformer
//! `TF(X) = w_o^T ReLU(alpha(X, W)^T X A)`.
//!
//! Negating every token leaves the attention scores unchanged, and
//! `ReLU(z) - ReLU(-z) = z`, so `VQ(X) - VQ(-X)` is an exact value oracle for
//! the attention regressor with parameters `(W, A w_o)`. Restricting the
//! oracle to one-row inputs exposes the bias-free FFN `x -> w_o^T ReLU(x^T A)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact::{recover, ExactConfig};
use crate::model::{relu, ModelKind, SequenceInput};
use crate::oracle::{OracleSession, ValueOracle};
use crate::report::RecoveryReport;

/// Antisymmetrised view of a Transformer session. Each derived query spends
/// two underlying queries.
pub struct AntisymmetricOracle<'a> {
    session: &'a mut OracleSession,
}

pub fn antisym_oracle(session: &mut OracleSession) -> AntisymmetricOracle<'_> {
    AntisymmetricOracle { session }
}

impl ValueOracle for AntisymmetricOracle<'_> {
    fn dim(&self) -> usize {
        self.session.dim()
    }

    fn value(&mut self, x: &SequenceInput) -> Result<f64> {
        let plus = self.session.vq(x)?;
        let minus = self.session.vq(&x.negated())?;
        Ok(plus - minus)
    }

    fn queries_issued(&self) -> u64 {
        self.session.query_count()
    }
}

/// Query access to a scalar function of one `d`-vector.
pub trait ScalarFunctionOracle {
    fn dim(&self) -> usize;

    fn eval(&mut self, x: &DVector<f64>) -> Result<f64>;

    fn queries_issued(&self) -> u64;
}

/// A Transformer session restricted to length-1 inputs.
pub struct OneRowOracle<'a> {
    session: &'a mut OracleSession,
}

impl<'a> OneRowOracle<'a> {
    pub fn new(session: &'a mut OracleSession) -> Self {
        Self { session }
    }
}

impl ScalarFunctionOracle for OneRowOracle<'_> {
    fn dim(&self) -> usize {
        self.session.dim()
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.session.vq(&SequenceInput::single(x))
    }

    fn queries_issued(&self) -> u64 {
        self.session.query_count()
    }
}

/// FFN parameters that reproduce the target function. Parameters are only
/// determined up to a permutation of hidden units and a positive rescaling
/// `(c a_j, w_j / c)` of each unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnLearnerResult {
    pub hidden_matrix: DMatrix<f64>,
    pub output_vector: DVector<f64>,
    pub equivalence_class_note: String,
}

impl FfnLearnerResult {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let z = self.hidden_matrix.transpose() * x;
        z.iter()
            .zip(self.output_vector.iter())
            .map(|(zi, wi)| wi * relu(*zi))
            .sum()
    }
}

/// Learns a bias-free two-layer ReLU network `x -> w_o^T ReLU(x^T A)` from
/// value queries.
pub trait FfnLearner {
    fn learn(
        &mut self,
        oracle: &mut dyn ScalarFunctionOracle,
        hidden_width: usize,
    ) -> Result<FfnLearnerResult>;
}

#[derive(Debug, Clone)]
pub struct TransformerRecovery {
    pub score_matrix: DMatrix<f64>,
    /// The merged value vector `A w_o` read through the antisymmetric oracle.
    pub value_vector: DVector<f64>,
    pub ffn: Option<FfnLearnerResult>,
    pub report: RecoveryReport,
}

/// FFN phase on one-row queries (when a learner is given), then exact
/// attention extraction through the antisymmetric oracle. Total queries:
/// `Q_FFN + 2 (d + d^2)`.
pub fn recover_transformer(
    session: &mut OracleSession,
    hidden_width: usize,
    learner: Option<&mut dyn FfnLearner>,
    config: &ExactConfig,
) -> Result<TransformerRecovery> {
    if session.model_kind() != ModelKind::Transformer {
        return Err(Error::UnsupportedConfig(
            "transformer extraction needs a transformer session".into(),
        ));
    }
    let start = Instant::now();
    let before = session.query_count();

    let ffn = match learner {
        Some(learner) => {
            let mut one_row = OneRowOracle::new(session);
            Some(learner.learn(&mut one_row, hidden_width)?)
        }
        None => None,
    };
    let ffn_queries = session.query_count() - before;

    let mut antisym = antisym_oracle(session);
    let attention = recover(&mut antisym, config)?;

    let mut report = attention.clone();
    report.queries_used = session.query_count() - before;
    report.elapsed = start.elapsed();
    report.set("ffn_queries", ffn_queries as f64);
    report.set("attention_queries", attention.queries_used as f64);
    if let Some(ffn) = &ffn {
        let merged = &ffn.hidden_matrix * &ffn.output_vector;
        report.set("merged_value_mismatch", (merged - &attention.value_vector).norm());
    }
    Ok(TransformerRecovery {
        score_matrix: attention.score_matrix,
        value_vector: attention.value_vector,
        ffn,
        report,
    })
}
