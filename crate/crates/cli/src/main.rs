use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnprobe_cli::demo::demo_multihead;
use attnprobe_cli::extract::{
    run_extract, Algorithm, ExtractSettings, LearnerChoice, NoiseChoice, SchemeChoice,
};
use attnprobe_cli::generate::{generate, summary, GenSpec};
use attnprobe_cli::manifest::{manifest_path_for, replay, RunManifest};
use attnprobe_cli::model_io::{read_model, write_model, ModelDocument, ModelFile};
use attnprobe_cli::sweep::{run_sweep, write_csv, SweepGrid};
use attnprobe_cli::{CliError, CliResult, ExitStatus, REPORT_DIR_ENV};
use attnprobe_core::ModelKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnprobe", version, about = "Extract attention parameters from value queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded ground-truth model file.
    GenModel(GenArgs),
    /// Run an extraction algorithm against a model file.
    Extract(ExtractArgs),
    /// Replay a run manifest and check the report is reproduced exactly.
    Verify(VerifyArgs),
    /// Show two different multi-head models that compute the same function.
    DemoMultihead(DemoArgs),
    /// Sweep dimensions and settings over seeded instances, writing CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Attention,
    Transformer,
    Multihead,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "attention")]
    kind: KindArg,
    #[arg(long)]
    dim: usize,
    /// FFN hidden width (transformer).
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Number of heads (multihead).
    #[arg(long)]
    heads: Option<usize>,
    /// Build the score matrix with rank at most this.
    #[arg(long)]
    rank: Option<usize>,
    /// Rescale the score matrix to this Frobenius norm.
    #[arg(long)]
    norm_bound: Option<f64>,
    /// Lower bound on |v_i| (keeps ||v|| <= 1).
    #[arg(long)]
    margin: Option<f64>,
    /// Use an all-zero value vector.
    #[arg(long)]
    zero_value: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(value_enum)]
    algorithm: Algorithm,
    #[arg(long)]
    model: PathBuf,
    /// Report path. Defaults to `<report-dir>/<model>.<algorithm>.json`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, env = REPORT_DIR_ENV, default_value = ".")]
    report_dir: PathBuf,
    /// Manifest path. Defaults to the report path with `.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "deterministic")]
    probe_scheme: SchemeChoice,
    /// Rank bound r (lowrank).
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Oversampling constant C (lowrank).
    #[arg(short = 'C', long = "oversampling", default_value_t = 3.0)]
    oversampling: f64,
    /// Bound W on ||W||_F (robust; optional probe shrinking for lowrank).
    #[arg(long)]
    norm_bound: Option<f64>,
    /// Margin mu with min |v_i| >= mu (robust).
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    #[arg(long, default_value_t = 0.1)]
    eps_v: f64,
    #[arg(long, default_value_t = 0.1)]
    eps_w: f64,
    /// Multiplies the robust tolerance schedule.
    #[arg(long, default_value_t = 1.0)]
    tau_scale: f64,
    #[arg(long, value_enum, default_value = "quantize")]
    noise_policy: NoiseChoice,
    /// Smallest tolerance the approximate oracle accepts.
    #[arg(long, default_value_t = 0.0)]
    oracle_floor: f64,
    #[arg(long, value_enum, default_value = "reference")]
    ffn_learner: LearnerChoice,
    /// Held-out inputs for the Transformer functional check.
    #[arg(long, default_value_t = 1000)]
    holdout_samples: usize,
    /// Include recovered parameters in the report.
    #[arg(long)]
    include_params: bool,
    /// Include ground-truth parameters in the report.
    #[arg(long)]
    include_truth: bool,
    /// Include wall-clock time in the report.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that relative manifest paths are resolved against.
    #[arg(long, default_value = ".")]
    base: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Also write the full JSON report here.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sweep grid as JSON; overrides the grid flags.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exact")]
    algorithm: Algorithm,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [4usize, 8, 16])]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [1usize])]
    ranks: Vec<usize>,
    #[arg(short = 'C', long = "oversampling", value_delimiter = ',', num_args = 0.., default_values_t = [3.0f64])]
    oversampling: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [1.0f64])]
    tau_scales: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    #[arg(long, value_enum, default_value = "quantize")]
    noise_policy: NoiseChoice,
    #[arg(long, default_value_t = 3)]
    hidden_width: usize,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// CSV output path; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn gen_model(args: GenArgs) -> CliResult<ExitStatus> {
    let spec = GenSpec {
        kind: match args.kind {
            KindArg::Attention => ModelKind::Attention,
            KindArg::Transformer => ModelKind::Transformer,
            KindArg::Multihead => ModelKind::Multihead,
        },
        d: args.dim,
        hidden_width: args.hidden_width,
        heads: args.heads,
        rank: args.rank,
        norm_bound: args.norm_bound,
        margin: args.margin,
        zero_value: args.zero_value,
        seed: args.seed,
    };
    let model = generate(&spec)?;
    let doc = ModelDocument {
        model: ModelFile::from_model(&model),
        generator: Some(spec),
    };
    match &args.out {
        Some(path) => {
            write_model(path, &doc)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{}", attnprobe_cli::model_io::to_json(&doc)),
    }
    eprintln!("{}", summary(&model));
    Ok(ExitStatus::Success)
}

fn extract(args: ExtractArgs) -> CliResult<ExitStatus> {
    let (_, model) = read_model(&args.model)?;
    let model_bytes = std::fs::read(&args.model).map_err(|e| CliError::io(&args.model, e))?;
    let settings = ExtractSettings {
        algorithm: args.algorithm,
        seed: args.seed,
        probe_scheme: args.probe_scheme,
        rank: args.rank,
        oversampling: args.oversampling,
        norm_bound: args.norm_bound,
        margin: args.margin,
        eps_v: args.eps_v,
        eps_w: args.eps_w,
        tau_scale: args.tau_scale,
        noise_policy: args.noise_policy,
        oracle_floor: args.oracle_floor,
        ffn_learner: args.ffn_learner,
        holdout_samples: args.holdout_samples,
        include_params: args.include_params,
        include_truth: args.include_truth,
        timing: args.timing,
    };
    let outcome = run_extract(&model, &settings)?;
    let report_path = args.out.unwrap_or_else(|| {
        let stem = args
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        args.report_dir.join(format!("{stem}.{}.json", args.algorithm))
    });
    write_file(&report_path, &outcome.doc.to_json())?;

    let status = outcome.exit();
    let manifest = RunManifest::new(
        &settings,
        &absolute(&args.model),
        &model_bytes,
        &absolute(&report_path),
        &outcome.doc,
        status.code(),
        outcome.elapsed_ms,
    );
    let manifest_path = args.manifest.unwrap_or_else(|| manifest_path_for(&report_path));
    manifest.write(&manifest_path)?;

    let doc = &outcome.doc;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.3e}"));
    eprintln!(
        "{} d={} status={:?} queries={} rel_frob={} vec={}",
        doc.algorithm,
        doc.d,
        doc.status,
        doc.queries_used,
        fmt(doc.relative_frobenius_error),
        fmt(doc.vector_error)
    );
    if let Some(msg) = &doc.message {
        eprintln!("{msg}");
    }
    eprintln!("report: {}", report_path.display());
    eprintln!("manifest: {}", manifest_path.display());
    Ok(status)
}

fn verify(args: VerifyArgs) -> CliResult<ExitStatus> {
    let manifest = RunManifest::read(&args.manifest)?;
    let outcome = replay(&manifest, &args.base)?;
    println!("model unchanged: {}", outcome.model_matches);
    println!("report digest reproduced: {}", outcome.digest_matches);
    match outcome.file_matches {
        Some(m) => println!("report file reproduced: {m}"),
        None => println!("report file: missing"),
    }
    if outcome.identical() {
        println!("replay identical");
        Ok(ExitStatus::Success)
    } else {
        println!("replay MISMATCH (replayed digest {})", outcome.replayed_sha256);
        Ok(ExitStatus::ReplayMismatch)
    }
}

fn demo(args: DemoArgs) -> CliResult<ExitStatus> {
    let report = demo_multihead(args.heads, args.dim, args.seed, args.samples, args.max_len)?;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("heads={} d={} seed={}", report.heads, report.d, report.seed);
    println!("lambda  = [{}]", fmt(&report.lambda));
    println!("lambda' = [{}]", fmt(&report.lambda_prime));
    println!("first:  {}", serde_json::to_string(&report.first).expect("serializes"));
    println!("second: {}", serde_json::to_string(&report.second).expect("serializes"));
    println!(
        "parameter distance = {:.6} ({:.3} x ||b||)",
        report.parameter_distance,
        report.parameter_distance / report.value_norm
    );
    println!(
        "max |f1 - f2| over {} sampled inputs = {:.3e}",
        report.equality.samples, report.equality.max_abs_diff
    );
    println!("note: {}", report.equality.disclaimer);
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("serializes") + "\n";
        write_file(path, &text)?;
    }
    Ok(ExitStatus::Success)
}

fn bench(args: BenchArgs) -> CliResult<ExitStatus> {
    let grid = match &args.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: path.clone(),
                source,
            })?
        }
        None => SweepGrid {
            algorithm: args.algorithm,
            dims: args.dims,
            ranks: args.ranks,
            oversampling: args.oversampling,
            tau_scales: args.tau_scales,
            seeds: args.seeds,
            seed_offset: args.seed_offset,
            noise_policy: args.noise_policy,
            hidden_width: args.hidden_width,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let results = pool.install(|| run_sweep(&grid))?;
    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            write_csv(file, &rows)?;
            let ok = rows.iter().filter(|r| r.success).count();
            eprintln!("{} rows ({ok} successful) -> {}", rows.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            write_csv(stdout.lock(), &rows)?;
        }
    }
    Ok(ExitStatus::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Extract(a) => extract(a),
        Command::Verify(a) => verify(a),
        Command::DemoMultihead(a) => demo(a),
        Command::Bench(a) => bench(a),
    };
    let status = result.unwrap_or_else(|e| {
        let _ = writeln!(std::io::stderr(), "error: {e}");
        e.status()
    });
    ExitCode::from(status.code() as u8)
}
