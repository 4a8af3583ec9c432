use std::collections::BTreeMap;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::model::AttentionParams;

/// Outcome of one extraction run.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub score_matrix: DMatrix<f64>,
    pub value_vector: DVector<f64>,
    /// Oracle queries spent, measured as the session counter delta.
    pub queries_used: u64,
    pub elapsed: Duration,
    /// False only when an iterative solver stopped at its iteration cap.
    pub converged: bool,
    /// Named scalars such as condition numbers and solver residuals.
    pub diagnostics: BTreeMap<String, f64>,
    pub frobenius_error: Option<f64>,
    pub relative_frobenius_error: Option<f64>,
    pub vector_error: Option<f64>,
}

impl RecoveryReport {
    pub fn new(score_matrix: DMatrix<f64>, value_vector: DVector<f64>) -> Self {
        Self {
            score_matrix,
            value_vector,
            queries_used: 0,
            elapsed: Duration::ZERO,
            converged: true,
            diagnostics: BTreeMap::new(),
            frobenius_error: None,
            relative_frobenius_error: None,
            vector_error: None,
        }
    }

    pub fn recovered(&self) -> AttentionParams {
        AttentionParams {
            score_matrix: self.score_matrix.clone(),
            value_vector: self.value_vector.clone(),
        }
    }

    /// Fills in the error norms against known ground truth.
    pub fn compare_with(&mut self, truth_w: &DMatrix<f64>, truth_v: &DVector<f64>) {
        let fro = (&self.score_matrix - truth_w).norm();
        let scale = truth_w.norm();
        self.frobenius_error = Some(fro);
        self.relative_frobenius_error = Some(if scale > 0.0 { fro / scale } else { fro });
        self.vector_error = Some((&self.value_vector - truth_v).norm());
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.diagnostics.insert(name.to_string(), value);
    }
}
