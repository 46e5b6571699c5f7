mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use wholebody_core::fit::Bucketing;
use wholebody_core::projection::CameraKind;
use wholebody_core::{Error, Result};

use commands::*;
use manifest::{write_json_atomic, RunManifest, MANIFEST_FILE};

/// Output directory used when `--out` is not given.
const OUT_DIR_ENV: &str = "WHOLEBODY_OUT_DIR";

#[derive(Parser)]
#[command(name = "wholebody", version, about = "Toy whole-body model: data generation, fitting, regression and camera-model benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save a procedural body model.
    Model(ModelArgs),
    /// Generate a synthetic 2D/3D dataset.
    Gen(GenArgs),
    /// Fit the model to every sample's 2D keypoints.
    Fit(FitArgs),
    /// Two-phase regressor training.
    Train(TrainArgs),
    /// Score a trained regressor or saved fits against a dataset.
    Eval(EvalArgs),
    /// Camera-model comparison across camera distances.
    BenchDistance(BenchDistanceArgs),
    /// Camera-model comparison across azimuths.
    BenchViewpoint(BenchViewpointArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with the command's config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $WHOLEBODY_OUT_DIR, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_vertices: Option<usize>,
    #[arg(long)]
    vertices_per_ring: Option<usize>,
    #[arg(long)]
    n_shape: Option<usize>,
    #[arg(long)]
    n_expression: Option<usize>,
    #[arg(long)]
    hand_pca: Option<usize>,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    angle_fraction: Option<f64>,
    #[arg(long)]
    shape_range: Option<f64>,
    #[arg(long)]
    hand_pca_range: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    bank_file: Option<PathBuf>,
    #[arg(long)]
    strict_bank: bool,
    #[command(flatten)]
    bank: BankArgs,
    /// Comma-separated multiples of the body extent.
    #[arg(long, value_delimiter = ',')]
    distance_factors: Option<Vec<f64>>,
    #[arg(long)]
    azimuths: Option<usize>,
}

#[derive(Args)]
struct FitTuning {
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    stage2_iterations: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    orientation_starts: Option<usize>,
    #[arg(long)]
    lambda_beta: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    /// Comma-separated: perspective, weak, d2s.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    camera_kinds: Option<Vec<CameraKind>>,
    #[arg(long, value_parser = parse_bucketing)]
    bucketing: Option<Bucketing>,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    sts_cadence: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    fit_results: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    camera_kind: Option<CameraKind>,
    #[arg(long, value_parser = parse_bucketing)]
    bucketing: Option<Bucketing>,
}

#[derive(Args)]
struct BenchDistanceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated multiples of the body extent.
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    #[arg(long)]
    n_per_bucket: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    camera_kinds: Option<Vec<CameraKind>>,
    #[command(flatten)]
    bank: BankArgs,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args)]
struct BenchViewpointArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    viewpoints: Option<usize>,
    #[arg(long)]
    n_per_bucket: Option<usize>,
    /// Multiple of the body extent.
    #[arg(long)]
    distance: Option<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    camera_kinds: Option<Vec<CameraKind>>,
    #[command(flatten)]
    bank: BankArgs,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the replayed manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_kind(s: &str) -> std::result::Result<CameraKind, String> {
    CameraKind::parse(s).map_err(|e| e.to_string())
}

fn parse_bucketing(s: &str) -> std::result::Result<Bucketing, String> {
    match s {
        "distance" => Ok(Bucketing::Distance),
        "viewpoint" => Ok(Bucketing::Viewpoint),
        other => Err(format!("unknown bucketing `{other}` (distance or viewpoint)")),
    }
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

fn base<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Configuration(format!("{}: {e}", p.display()))),
        None => Ok(T::default()),
    }
}

fn apply_bank(bank: &mut wholebody_core::synth::BankConfig, a: BankArgs) {
    set!(bank.angle_fraction, a.angle_fraction);
    set!(bank.shape_range, a.shape_range);
    set!(bank.hand_pca_range, a.hand_pca_range);
}

fn apply_tuning(fit: &mut wholebody_core::fit::FitConfig, t: FitTuning) {
    set!(fit.stage1_iterations, t.stage1_iterations);
    set!(fit.stage2_iterations, t.stage2_iterations);
    set!(fit.tolerance, t.tolerance);
    set!(fit.orientation_starts, t.orientation_starts);
    set!(fit.lambda_beta, t.lambda_beta);
}

/// Config file first, then flags.
fn resolve(command: Command) -> Result<(Resolved, Option<PathBuf>, usize)> {
    let (resolved, common) = match command {
        Command::Model(a) => {
            let mut c: ModelConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.toy.n_vertices, a.n_vertices);
            set!(c.toy.vertices_per_ring, a.vertices_per_ring);
            set!(c.toy.n_shape, a.n_shape);
            set!(c.toy.n_expression, a.n_expression);
            set!(c.toy.hand_pca, a.hand_pca);
            (Resolved::Model(c), a.common)
        }
        Command::Gen(a) => {
            let mut c: GenConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.model, a.model);
            set!(c.n, a.n);
            if a.bank_file.is_some() {
                c.bank_file = a.bank_file;
            }
            c.strict_bank |= a.strict_bank;
            apply_bank(&mut c.bank, a.bank);
            set!(c.camera.distance_factors, a.distance_factors);
            set!(c.camera.azimuths, a.azimuths);
            (Resolved::Gen(c), a.common)
        }
        Command::Fit(a) => {
            let mut c: FitCommandConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.model, a.model);
            set!(c.dataset, a.dataset);
            if a.index.is_some() {
                c.index = a.index;
            }
            set!(c.camera_kinds, a.camera_kinds);
            set!(c.bucketing, a.bucketing);
            apply_tuning(&mut c.fit, a.tuning);
            (Resolved::Fit(c), a.common)
        }
        Command::Train(a) => {
            let mut c: TrainCommandConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.model, a.model);
            set!(c.dataset, a.dataset);
            set!(c.train.lr, a.lr);
            set!(c.train.batch_size, a.batch_size);
            set!(c.train.phase1_epochs, a.phase1_epochs);
            set!(c.train.phase2_epochs, a.phase2_epochs);
            set!(c.train.sts_cadence, a.sts_cadence);
            set!(c.train.val_fraction, a.val_fraction);
            (Resolved::Train(c), a.common)
        }
        Command::Eval(a) => {
            let mut c: EvalConfig = base(a.common.config.as_deref())?;
            set!(c.model, a.model);
            set!(c.dataset, a.dataset);
            if a.weights.is_some() {
                c.weights = a.weights;
            }
            if a.fit_results.is_some() {
                c.fit_results = a.fit_results;
            }
            if a.camera_kind.is_some() {
                c.camera_kind = a.camera_kind;
            }
            if a.bucketing.is_some() {
                c.bucketing = a.bucketing;
            }
            (Resolved::Eval(c), a.common)
        }
        Command::BenchDistance(a) => {
            let mut c: BenchDistanceConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.model, a.model);
            set!(c.distances, a.distances);
            set!(c.n_per_bucket, a.n_per_bucket);
            set!(c.camera_kinds, a.camera_kinds);
            apply_bank(&mut c.bank, a.bank);
            apply_tuning(&mut c.fit, a.tuning);
            (Resolved::BenchDistance(c), a.common)
        }
        Command::BenchViewpoint(a) => {
            let mut c: BenchViewpointConfig = base(a.common.config.as_deref())?;
            set!(c.seed, a.common.seed);
            set!(c.model, a.model);
            set!(c.viewpoints, a.viewpoints);
            set!(c.n_per_bucket, a.n_per_bucket);
            set!(c.distance, a.distance);
            set!(c.camera_kinds, a.camera_kinds);
            apply_bank(&mut c.bank, a.bank);
            apply_tuning(&mut c.fit, a.tuning);
            (Resolved::BenchViewpoint(c), a.common)
        }
        Command::Replay(a) => {
            let m = RunManifest::load(&a.manifest)?;
            let out = a.out.or_else(|| a.manifest.parent().map(Path::to_path_buf));
            return Ok((m.resolved()?, out, a.jobs.unwrap_or(m.jobs)));
        }
    };
    Ok((resolved.finalize()?, common.out, common.jobs))
}

fn execute(command: Command) -> Result<serde_json::Value> {
    let (resolved, out, jobs) = resolve(command)?;
    let out = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let start = Instant::now();
    let files = resolved.run(&out, jobs)?;
    let tagged = serde_json::to_value(&resolved)?;
    let manifest = RunManifest {
        command: resolved.name().to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: tagged["config"].clone(),
        seed: resolved.seed(),
        jobs,
        inputs: files.inputs,
        outputs: files.outputs,
        duration_s: start.elapsed().as_secs_f64(),
    };
    write_json_atomic(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(serde_json::json!({
        "command": manifest.command,
        "out": out,
        "outputs": manifest.outputs,
        "duration_s": manifest.duration_s,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
