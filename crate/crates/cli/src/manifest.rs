//! Run manifests: everything needed to replay an extraction run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::extract::{run_extract, ExtractSettings, ReportDoc};
use crate::model_io::read_model;
use crate::seeds::sha256_hex;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub probe: u64,
    pub noise: u64,
    pub ffn: u64,
    pub holdout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub toolkit_version: String,
    pub timestamp: String,
    pub model_path: PathBuf,
    pub model_sha256: String,
    pub report_path: PathBuf,
    pub report_sha256: String,
    pub settings: ExtractSettings,
    pub seeds: DerivedSeeds,
    pub exit_code: i32,
    pub elapsed_ms: f64,
}

impl RunManifest {
    pub fn new(
        settings: &ExtractSettings,
        model_path: &Path,
        model_bytes: &[u8],
        report_path: &Path,
        report: &ReportDoc,
        exit_code: i32,
        elapsed_ms: f64,
    ) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            command: "extract".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            model_path: model_path.to_path_buf(),
            model_sha256: sha256_hex(model_bytes),
            report_path: report_path.to_path_buf(),
            report_sha256: canonical_digest(report),
            settings: settings.clone(),
            seeds: DerivedSeeds {
                probe: settings.probe_seed(),
                noise: settings.noise_seed(),
                ffn: settings.learner_seed(),
                holdout: settings.holdout_seed(),
            },
            exit_code,
            elapsed_ms,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifests serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Digest of a report with wall-clock timing removed, so timed runs replay too.
pub fn canonical_digest(report: &ReportDoc) -> String {
    let mut doc = report.clone();
    doc.elapsed_ms = None;
    sha256_hex(doc.to_json().as_bytes())
}

/// Default manifest location next to a report: `x.json` -> `x.manifest.json`.
pub fn manifest_path_for(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    report.with_file_name(format!("{stem}.manifest.json"))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub model_matches: bool,
    /// The replayed report hashes to the recorded digest.
    pub digest_matches: bool,
    /// The replayed report equals the report file on disk byte for byte
    /// (apart from a recorded `elapsed_ms`), when the file is present.
    pub file_matches: Option<bool>,
    pub replayed_sha256: String,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.model_matches && self.digest_matches && self.file_matches.unwrap_or(true)
    }
}

/// Re-runs the manifest's extraction and compares the report byte for byte.
/// Relative paths are resolved against `base` (the directory the original
/// run was started from).
pub fn replay(manifest: &RunManifest, base: &Path) -> CliResult<ReplayOutcome> {
    let model_path = resolve(base, &manifest.model_path);
    let model_bytes = std::fs::read(&model_path).map_err(|e| CliError::io(&model_path, e))?;
    let (_, model) = read_model(&model_path)?;
    let outcome = run_extract(&model, &manifest.settings)?;
    let replayed_sha256 = canonical_digest(&outcome.doc);
    let report_path = resolve(base, &manifest.report_path);
    let file_matches = match std::fs::read_to_string(&report_path) {
        Ok(text) => {
            let on_disk: ReportDoc = serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: report_path.clone(),
                source,
            })?;
            let mut expected = outcome.doc.clone();
            expected.elapsed_ms = on_disk.elapsed_ms;
            Some(expected.to_json() == text)
        }
        Err(_) => None,
    };
    Ok(ReplayOutcome {
        model_matches: sha256_hex(&model_bytes) == manifest.model_sha256,
        digest_matches: replayed_sha256 == manifest.report_sha256,
        file_matches,
        replayed_sha256,
    })
}
