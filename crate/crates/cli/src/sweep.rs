//! Parameter sweeps over seeded instances, written as CSV.

use std::io::Write;
use std::time::Instant;

use attnprobe_core::RecoveryReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::extract::{run_extract, Algorithm, ExtractSettings, NoiseChoice, RunStatus};
use crate::generate::{generate, GenSpec};
use crate::seeds::derive_seed;

pub const CSV_HEADER: [&str; 11] = [
    "algorithm",
    "d",
    "r",
    "m",
    "C",
    "tau_scale",
    "queries",
    "frob_error",
    "vec_error",
    "success",
    "elapsed_ms",
];

/// Success thresholds on relative Frobenius and vector error.
pub const EXACT_FROB_TOL: f64 = 1e-7;
pub const EXACT_VEC_TOL: f64 = 1e-12;
pub const LOWRANK_FROB_TOL: f64 = 1e-4;
/// Singular values past the rank bound must be below this fraction of the largest.
pub const LOWRANK_RANK_TOL: f64 = 1e-6;

/// A sweep grid. Axes that do not apply to the algorithm are ignored; an
/// empty axis that does apply yields no cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub algorithm: Algorithm,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub oversampling: Vec<f64>,
    #[serde(default)]
    pub tau_scales: Vec<f64>,
    pub seeds: u64,
    #[serde(default)]
    pub seed_offset: u64,
    #[serde(default = "default_noise")]
    pub noise_policy: NoiseChoice,
    /// Hidden width of generated Transformers.
    #[serde(default = "default_width")]
    pub hidden_width: usize,
}

fn default_noise() -> NoiseChoice {
    NoiseChoice::Quantize
}

fn default_width() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub d: usize,
    pub r: Option<usize>,
    pub c: Option<f64>,
    pub tau_scale: Option<f64>,
    pub seed: u64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub d: usize,
    pub r: Option<usize>,
    pub m: usize,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub tau_scale: Option<f64>,
    pub queries: u64,
    pub frob_error: Option<f64>,
    pub vec_error: Option<f64>,
    pub success: bool,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub row: SweepRow,
    pub status: RunStatus,
    pub report: Option<RecoveryReport>,
}

impl SweepGrid {
    pub fn new(algorithm: Algorithm, dims: Vec<usize>, seeds: u64) -> Self {
        Self {
            algorithm,
            dims,
            ranks: Vec::new(),
            oversampling: Vec::new(),
            tau_scales: Vec::new(),
            seeds,
            seed_offset: 0,
            noise_policy: default_noise(),
            hidden_width: default_width(),
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let seeds = self.seed_offset..self.seed_offset + self.seeds;
        let mut cells = Vec::new();
        for &d in &self.dims {
            let base = Cell {
                algorithm: self.algorithm,
                d,
                r: None,
                c: None,
                tau_scale: None,
                seed: 0,
            };
            match self.algorithm {
                Algorithm::Exact | Algorithm::Transformer => {
                    cells.extend(seeds.clone().map(|seed| Cell { seed, ..base }))
                }
                Algorithm::Lowrank => {
                    for &r in &self.ranks {
                        for &c in &self.oversampling {
                            cells.extend(seeds.clone().map(|seed| Cell {
                                r: Some(r),
                                c: Some(c),
                                seed,
                                ..base
                            }));
                        }
                    }
                }
                Algorithm::Robust => {
                    for &t in &self.tau_scales {
                        cells.extend(seeds.clone().map(|seed| Cell {
                            tau_scale: Some(t),
                            seed,
                            ..base
                        }));
                    }
                }
            }
        }
        cells
    }
}

/// The instance family used for each algorithm in sweeps. The model depends
/// only on `(d, r, seed)`, so cells that differ in `C` or `tau_scale` share
/// their ground truth.
pub fn instance_spec(grid: &SweepGrid, cell: &Cell) -> GenSpec {
    let seed = derive_seed(cell.seed, &format!("model-d{}-r{:?}", cell.d, cell.r));
    let base = GenSpec::attention(cell.d, seed);
    match cell.algorithm {
        Algorithm::Exact => base,
        Algorithm::Lowrank => GenSpec {
            rank: cell.r,
            norm_bound: Some(1.0),
            ..base
        },
        Algorithm::Robust => GenSpec {
            norm_bound: Some(2.0),
            margin: Some(0.1),
            ..base
        },
        Algorithm::Transformer => GenSpec {
            kind: attnprobe_core::ModelKind::Transformer,
            hidden_width: Some(grid.hidden_width.min(cell.d)),
            ..base
        },
    }
}

pub fn cell_settings(grid: &SweepGrid, cell: &Cell) -> ExtractSettings {
    let mut s = ExtractSettings::new(cell.algorithm);
    s.seed = cell.seed;
    s.noise_policy = grid.noise_policy;
    if let Some(r) = cell.r {
        s.rank = r;
    }
    if let Some(c) = cell.c {
        s.oversampling = c;
    }
    if let Some(t) = cell.tau_scale {
        s.tau_scale = t;
    }
    if cell.algorithm == Algorithm::Lowrank {
        s.norm_bound = Some(1.0);
    }
    if cell.algorithm == Algorithm::Robust {
        s.norm_bound = Some(2.0);
    }
    s
}

fn probe_count(settings: &ExtractSettings, d: usize) -> usize {
    match settings.algorithm {
        Algorithm::Lowrank => settings.lowrank_config().measurements(d).min(d * d),
        _ => d * d,
    }
}

fn success(settings: &ExtractSettings, status: RunStatus, report: Option<&RecoveryReport>) -> bool {
    let Some(r) = report else { return false };
    if status != RunStatus::Ok {
        return false;
    }
    let (rel, fro, vec) = (
        r.relative_frobenius_error.unwrap_or(f64::INFINITY),
        r.frobenius_error.unwrap_or(f64::INFINITY),
        r.vector_error.unwrap_or(f64::INFINITY),
    );
    match settings.algorithm {
        Algorithm::Exact => rel <= EXACT_FROB_TOL && vec <= EXACT_VEC_TOL,
        Algorithm::Lowrank => {
            rel <= LOWRANK_FROB_TOL
                && r.diagnostics
                    .get("excess_singular_ratio")
                    .is_none_or(|x| *x <= LOWRANK_RANK_TOL)
        }
        Algorithm::Robust => fro <= settings.eps_w && vec <= settings.eps_v,
        Algorithm::Transformer => {
            rel <= EXACT_FROB_TOL
                && r.diagnostics
                    .get("holdout_max_abs_diff")
                    .is_none_or(|x| *x <= 1e-6)
        }
    }
}

pub fn run_cell(grid: &SweepGrid, cell: &Cell) -> CliResult<CellResult> {
    let start = Instant::now();
    let model = generate(&instance_spec(grid, cell))?;
    let settings = cell_settings(grid, cell);
    let outcome = run_extract(&model, &settings)?;
    let ok = success(&settings, outcome.doc.status, outcome.report.as_ref());
    let row = SweepRow {
        algorithm: cell.algorithm,
        d: cell.d,
        r: cell.r,
        m: probe_count(&settings, cell.d),
        c: cell.c,
        tau_scale: cell.tau_scale,
        queries: outcome.doc.queries_used,
        frob_error: outcome.doc.frobenius_error,
        vec_error: outcome.doc.vector_error,
        success: ok,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(CellResult {
        cell: *cell,
        row,
        status: outcome.doc.status,
        report: outcome.report,
    })
}

/// Runs every cell, in parallel, and returns results in grid order.
pub fn run_sweep(grid: &SweepGrid) -> CliResult<Vec<CellResult>> {
    grid.cells().par_iter().map(|c| run_cell(grid, c)).collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[SweepRow]) -> CliResult<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer
        .flush()
        .map_err(|e| CliError::io("<csv output>", e))
}

/// Success rate per distinct value of `key`, in first-seen order.
pub fn success_rates<K: PartialEq + Copy>(results: &[CellResult], key: impl Fn(&Cell) -> K) -> Vec<(K, f64)> {
    let mut groups: Vec<(K, usize, usize)> = Vec::new();
    for r in results {
        let k = key(&r.cell);
        let slot = match groups.iter().position(|g| g.0 == k) {
            Some(i) => i,
            None => {
                groups.push((k, 0, 0));
                groups.len() - 1
            }
        };
        groups[slot].1 += r.row.success as usize;
        groups[slot].2 += 1;
    }
    groups
        .into_iter()
        .map(|(k, ok, n)| (k, ok as f64 / n as f64))
        .collect()
}
