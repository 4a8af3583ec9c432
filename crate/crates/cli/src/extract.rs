//! One extraction run against a hidden model, scored against the truth.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use attnprobe_core::{
    recover, recover_lowrank, recover_robust, recover_transformer, Error as CoreError,
    ExactConfig, FfnConfig, FfnLearner, LowRankConfig, Model, NoisePolicy, OracleSession,
    ProbeScheme, RecoveryReport, ReferenceFfnLearner, RobustConfig, SequenceInput,
    TransformerParams,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{core_status, CliError, CliResult, ExitStatus};
use crate::model_io::{matrix_rows, ModelFile};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Exact,
    Lowrank,
    Robust,
    Transformer,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Exact => "exact",
            Algorithm::Lowrank => "lowrank",
            Algorithm::Robust => "robust",
            Algorithm::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseChoice {
    Zero,
    Quantize,
    HashSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LearnerChoice {
    Reference,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Deterministic,
    Gaussian,
}

/// Every knob of an extraction run. Serialized verbatim into run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSettings {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub probe_scheme: SchemeChoice,
    pub rank: usize,
    pub oversampling: f64,
    pub norm_bound: Option<f64>,
    pub margin: f64,
    pub eps_v: f64,
    pub eps_w: f64,
    pub tau_scale: f64,
    pub noise_policy: NoiseChoice,
    pub oracle_floor: f64,
    pub ffn_learner: LearnerChoice,
    pub holdout_samples: usize,
    pub include_params: bool,
    pub include_truth: bool,
    pub timing: bool,
}

impl ExtractSettings {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            seed: 0,
            probe_scheme: SchemeChoice::Deterministic,
            rank: 1,
            oversampling: 3.0,
            norm_bound: None,
            margin: 0.1,
            eps_v: 0.1,
            eps_w: 0.1,
            tau_scale: 1.0,
            noise_policy: NoiseChoice::Quantize,
            oracle_floor: 0.0,
            ffn_learner: LearnerChoice::Reference,
            holdout_samples: 1000,
            include_params: false,
            include_truth: false,
            timing: false,
        }
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, "probe")
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, "noise")
    }

    pub fn learner_seed(&self) -> u64 {
        derive_seed(self.seed, "ffn")
    }

    pub fn holdout_seed(&self) -> u64 {
        derive_seed(self.seed, "holdout")
    }

    fn exact_config(&self) -> ExactConfig {
        let scheme = match self.probe_scheme {
            SchemeChoice::Deterministic => ProbeScheme::Deterministic,
            SchemeChoice::Gaussian => ProbeScheme::Gaussian {
                seed: self.probe_seed(),
            },
        };
        ExactConfig {
            scheme,
            ..Default::default()
        }
    }

    pub fn lowrank_config(&self) -> LowRankConfig {
        LowRankConfig {
            rank_bound: self.rank,
            oversampling: self.oversampling,
            seed: self.probe_seed(),
            norm_bound: self.norm_bound,
            ..Default::default()
        }
    }

    pub fn robust_config(&self) -> CliResult<RobustConfig> {
        let mut cfg = RobustConfig::new(
            self.norm_bound.unwrap_or(2.0),
            self.margin,
            self.eps_v,
            self.eps_w,
        )?;
        cfg.tau_scale = self.tau_scale;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise(&self) -> NoisePolicy {
        match self.noise_policy {
            NoiseChoice::Zero => NoisePolicy::Zero,
            NoiseChoice::Quantize => NoisePolicy::Quantize,
            NoiseChoice::HashSign => NoisePolicy::HashSign {
                seed: self.noise_seed(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    NonIdentifiable,
    ToleranceUnsatisfiable,
    NotConverged,
    LearnerFailure,
    Error,
}

impl RunStatus {
    pub fn exit(self) -> ExitStatus {
        match self {
            RunStatus::Ok => ExitStatus::Success,
            RunStatus::NonIdentifiable => ExitStatus::NonIdentifiable,
            RunStatus::ToleranceUnsatisfiable => ExitStatus::ToleranceUnsatisfiable,
            RunStatus::NotConverged => ExitStatus::NotConverged,
            RunStatus::LearnerFailure => ExitStatus::LearnerFailure,
            RunStatus::Error => ExitStatus::Failure,
        }
    }

    fn from_error(e: &CoreError) -> Self {
        match core_status(e) {
            ExitStatus::NonIdentifiable => RunStatus::NonIdentifiable,
            ExitStatus::ToleranceUnsatisfiable => RunStatus::ToleranceUnsatisfiable,
            ExitStatus::LearnerFailure => RunStatus::LearnerFailure,
            _ => RunStatus::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredParams {
    pub score_matrix: Vec<Vec<f64>>,
    pub value_vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_vector: Option<Vec<f64>>,
}

/// The JSON report of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub algorithm: Algorithm,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub d: usize,
    pub queries_used: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frobenius_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_frobenius_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_error: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered: Option<RecoveredParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<ModelFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

impl ReportDoc {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports serialize");
        text.push('\n');
        text
    }
}

/// A finished run: the report plus the core recovery output, if any.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub doc: ReportDoc,
    pub report: Option<RecoveryReport>,
    pub elapsed_ms: f64,
}

impl RunOutcome {
    pub fn exit(&self) -> ExitStatus {
        self.doc.status.exit()
    }
}

fn random_input(rng: &mut ChaCha8Rng, d: usize) -> CliResult<SequenceInput> {
    let n = rng.random_range(1..=4);
    Ok(SequenceInput::new(DMatrix::from_fn(n, d, |_, _| {
        StandardNormal.sample(rng)
    }))?)
}

/// Largest difference between two Transformers over seeded random inputs.
pub fn transformer_disagreement(
    a: &TransformerParams,
    b: &TransformerParams,
    samples: usize,
    seed: u64,
) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (Model::Transformer(a.clone()), Model::Transformer(b.clone()));
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = random_input(&mut rng, a.dim())?;
        worst = worst.max((a.forward(&x)? - b.forward(&x)?).abs());
    }
    Ok(worst)
}

fn kind_mismatch(settings: &ExtractSettings, model: &Model) -> CliError {
    CliError::Invalid(format!(
        "algorithm {} cannot run on a {:?} model",
        settings.algorithm,
        model.kind()
    ))
}

/// Runs the configured algorithm. Core failures become a report with a
/// non-ok status; only configuration mistakes are returned as errors.
pub fn run_extract(model: &Model, settings: &ExtractSettings) -> CliResult<RunOutcome> {
    let start = Instant::now();
    let d = model.dim();
    let mut session = match (settings.algorithm, model) {
        (Algorithm::Exact | Algorithm::Lowrank, Model::Attention(_))
        | (Algorithm::Transformer, Model::Transformer(_)) => OracleSession::exact(model.clone()),
        (Algorithm::Robust, Model::Attention(_)) => {
            OracleSession::approximate(model.clone(), settings.noise(), settings.oracle_floor)?
        }
        _ => return Err(kind_mismatch(settings, model)),
    };

    let mut ffn = None;
    let result: attnprobe_core::Result<RecoveryReport> = match settings.algorithm {
        Algorithm::Exact => recover(&mut session, &settings.exact_config()),
        Algorithm::Lowrank => recover_lowrank(&mut session, &settings.lowrank_config()),
        Algorithm::Robust => recover_robust(&mut session, &settings.robust_config()?),
        Algorithm::Transformer => {
            let Model::Transformer(truth) = model else {
                unreachable!()
            };
            let mut reference = ReferenceFfnLearner::new(FfnConfig {
                seed: settings.learner_seed(),
                ..Default::default()
            });
            let learner: Option<&mut dyn FfnLearner> = match settings.ffn_learner {
                LearnerChoice::Reference => Some(&mut reference),
                LearnerChoice::None => None,
            };
            recover_transformer(&mut session, truth.hidden_width(), learner, &settings.exact_config())
                .map(|out| {
                    ffn = out.ffn;
                    out.report
                })
        }
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut doc = ReportDoc {
        algorithm: settings.algorithm,
        status: RunStatus::Ok,
        message: None,
        d,
        queries_used: session.query_count(),
        converged: None,
        frobenius_error: None,
        relative_frobenius_error: None,
        vector_error: None,
        diagnostics: BTreeMap::new(),
        recovered: None,
        truth: settings.include_truth.then(|| ModelFile::from_model(model)),
        elapsed_ms: settings.timing.then_some(elapsed_ms),
    };

    let mut report = match result {
        Ok(report) => report,
        Err(e) => {
            doc.status = RunStatus::from_error(&e);
            doc.message = Some(e.to_string());
            return Ok(RunOutcome {
                doc,
                report: None,
                elapsed_ms,
            });
        }
    };

    match model {
        Model::Attention(truth) => report.compare_with(&truth.score_matrix, &truth.value_vector),
        Model::Transformer(truth) => {
            report.compare_with(&truth.score_matrix, &truth.merged_value_vector());
            if let Some(ffn) = &ffn {
                let recovered = TransformerParams::new(
                    report.score_matrix.clone(),
                    ffn.hidden_matrix.clone(),
                    ffn.output_vector.clone(),
                )?;
                let worst = transformer_disagreement(
                    &recovered,
                    truth,
                    settings.holdout_samples,
                    settings.holdout_seed(),
                )?;
                report.set("holdout_max_abs_diff", worst);
            }
        }
        Model::MultiHead(_) => return Err(kind_mismatch(settings, model)),
    }

    doc.converged = Some(report.converged);
    if !report.converged {
        doc.status = RunStatus::NotConverged;
    }
    doc.frobenius_error = report.frobenius_error;
    doc.relative_frobenius_error = report.relative_frobenius_error;
    doc.vector_error = report.vector_error;
    doc.diagnostics = report.diagnostics.clone();
    if settings.include_params {
        doc.recovered = Some(RecoveredParams {
            score_matrix: matrix_rows(&report.score_matrix),
            value_vector: report.value_vector.iter().copied().collect(),
            hidden_matrix: ffn.as_ref().map(|f| matrix_rows(&f.hidden_matrix)),
            output_vector: ffn.as_ref().map(|f| f.output_vector.iter().copied().collect()),
        });
    }
    Ok(RunOutcome {
        doc,
        report: Some(report),
        elapsed_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate, GenSpec};
    use attnprobe_core::ModelKind;

    #[test]
    fn exact_run_report() {
        let model = generate(&GenSpec::attention(4, 7)).unwrap();
        let out = run_extract(&model, &ExtractSettings::new(Algorithm::Exact)).unwrap();
        assert_eq!(out.exit(), ExitStatus::Success);
        assert_eq!(out.doc.queries_used, 20);
        assert!(out.doc.relative_frobenius_error.unwrap() <= 1e-7);
        assert!(out.doc.recovered.is_none());
        assert!(out.doc.truth.is_none());
        assert!(out.doc.elapsed_ms.is_none());
    }

    #[test]
    fn zero_value_vector_exit_code() {
        let spec = GenSpec {
            zero_value: true,
            ..GenSpec::attention(5, 1)
        };
        let model = generate(&spec).unwrap();
        let out = run_extract(&model, &ExtractSettings::new(Algorithm::Exact)).unwrap();
        assert_eq!(out.doc.status, RunStatus::NonIdentifiable);
        assert_eq!(out.exit(), ExitStatus::NonIdentifiable);
        assert_eq!(out.doc.queries_used, 5);
    }

    #[test]
    fn robust_floor_exit_code() {
        let spec = GenSpec {
            margin: Some(0.1),
            norm_bound: Some(2.0),
            ..GenSpec::attention(4, 1)
        };
        let model = generate(&spec).unwrap();
        let mut settings = ExtractSettings::new(Algorithm::Robust);
        settings.oracle_floor = 1e-2;
        let out = run_extract(&model, &settings).unwrap();
        assert_eq!(out.exit(), ExitStatus::ToleranceUnsatisfiable);
    }

    #[test]
    fn params_and_truth_are_flag_gated() {
        let model = generate(&GenSpec::attention(3, 2)).unwrap();
        let mut settings = ExtractSettings::new(Algorithm::Exact);
        settings.include_params = true;
        settings.include_truth = true;
        let out = run_extract(&model, &settings).unwrap();
        assert!(out.doc.recovered.is_some());
        assert_eq!(out.doc.truth, Some(ModelFile::from_model(&model)));
    }

    #[test]
    fn transformer_without_learner() {
        let spec = GenSpec {
            kind: ModelKind::Transformer,
            hidden_width: Some(3),
            ..GenSpec::attention(4, 3)
        };
        let model = generate(&spec).unwrap();
        let mut settings = ExtractSettings::new(Algorithm::Transformer);
        settings.ffn_learner = LearnerChoice::None;
        let out = run_extract(&model, &settings).unwrap();
        assert_eq!(out.exit(), ExitStatus::Success);
        assert_eq!(out.doc.queries_used, 2 * 20);
        assert!(!out.doc.diagnostics.contains_key("holdout_max_abs_diff"));
    }

    #[test]
    fn mismatched_kind_is_a_usage_error() {
        let model = generate(&GenSpec::attention(3, 2)).unwrap();
        assert!(run_extract(&model, &ExtractSettings::new(Algorithm::Transformer)).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let spec = GenSpec {
            rank: Some(1),
            norm_bound: Some(1.0),
            ..GenSpec::attention(8, 4)
        };
        let model = generate(&spec).unwrap();
        let settings = ExtractSettings::new(Algorithm::Lowrank);
        let a = run_extract(&model, &settings).unwrap().doc.to_json();
        let b = run_extract(&model, &settings).unwrap().doc.to_json();
        assert_eq!(a, b);
    }
}
