//! The `oavnn` command-line harness.
//!
//! Exit codes: 0 success, 2 usage/config/parse errors, 3 degenerate input,
//! 4 numerical failures (divergence, failed checks).

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use oavnn::geometry::{centroid, load_xyz, mirror_residual, save_xyz, sub, PointCloud};
use oavnn::layers::{layer_gradient_check, GRADIENT_LAYERS, GRADIENT_STEP};
use oavnn::model::{
    equivariance_probe, evaluate_prepared, prepare_test_set, train_with, Behavior, ModelParams, Stage,
};
use oavnn::shapes::{gen_shape, ShapeKind, ShapeSpec};
use oavnn::symmetry::{planar_symmetry_direction, segment_by_plane, DEFAULT_SHELLS};
use oavnn::Error;
use serde::{Deserialize, Serialize};

use crate::config::{load_dir, RunConfig};
use crate::report::{
    find_runs, render_svg, summarize, write_metrics_csv, RunCurves, RunSummary, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE, SUMMARY_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "oavnn", version, about = "Orientation-aware vector neurons: data, symmetry, training and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled mirror-symmetric clouds as XYZ files plus a manifest.
    GenData(GenDataArgs),
    /// Estimate the direction normal to a cloud's plane of symmetry.
    DetectSymmetry(DetectArgs),
    /// Split a cloud into left and right halves by its symmetry plane.
    SegmentPlane(SegmentArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Probe layers and models with random rotations and reflections.
    CheckEquivariance(EquivarianceArgs),
    /// Compare layer gradients with central differences.
    CheckGradients(GradientArgs),
    /// Plot learning curves of finished runs and summarize them.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub kind: ShapeKind,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHELLS)]
    pub shells: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHELLS)]
    pub shells: usize,
    /// Labels CSV; defaults to FILE with a `.labels.csv` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An XYZ file, a directory of XYZ files, or a run configuration whose
    /// test set is regenerated.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EquivarianceArgs {
    #[arg(long, default_value = "all")]
    pub stage: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Include reflections (half of the trials).
    #[arg(long)]
    pub improper: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    /// Minimum error a transform-sensitive stage must show.
    #[arg(long, default_value_t = 1e-3)]
    pub sensitivity: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradientArgs {
    #[arg(long, default_value = "all")]
    pub layer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON; defaults to OUT with a `.json` extension.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and found violations.
    CheckFailed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed(s) => f.write_str(s),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Contract(_)
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Json(_) => 2,
                Error::Degenerate(_) => 3,
                Error::Shape { .. } | Error::Domain { .. } | Error::NonFinite(_) | Error::Divergence { .. } => 4,
            },
            CliError::CheckFailed(_) => 4,
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Prints the effective configuration of a command to stderr.
fn echo<T: Serialize>(command: &str, cfg: &T) -> CliResult {
    eprintln!("effective config ({command}): {}", serde_json::to_string(cfg)?);
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::DetectSymmetry(a) => detect_symmetry(&a),
        Command::SegmentPlane(a) => segment_plane(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::CheckEquivariance(a) => check_equivariance(&a),
        Command::CheckGradients(a) => check_gradients(&a),
        Command::Report(a) => report(&a),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: ShapeSpec,
    /// Largest distance from a point mirrored in the x = 0 plane to the cloud.
    pub mirror_residual: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ShapeKind,
    pub count: usize,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub base_seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn gen_data(a: &GenDataArgs) -> CliResult {
    echo("gen-data", a)?;
    std::fs::create_dir_all(&a.out)?;
    let mut files = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let spec = ShapeSpec::new(a.kind, a.points, a.seed + i as u64, a.jitter);
        let cloud = gen_shape(&spec)?;
        let file = format!("{}_{:04}.xyz", a.kind, i);
        save_xyz(&cloud, a.out.join(&file))?;
        files.push(ManifestEntry {
            file,
            mirror_residual: mirror_residual(&cloud.points, [1.0, 0.0, 0.0]),
            spec,
        });
    }
    let manifest = Manifest {
        kind: a.kind,
        count: a.count,
        n_points: a.points,
        jitter_sigma: a.jitter,
        base_seed: a.seed,
        files,
    };
    std::fs::write(a.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} {} clouds to {}", a.count, a.kind, a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct DetectReport {
    file: String,
    points: usize,
    shells: usize,
    c: [f64; 3],
    magnitude: f64,
    direction: Option<[f64; 3]>,
    degenerate: bool,
}

fn detect_symmetry(a: &DetectArgs) -> CliResult {
    echo("detect-symmetry", a)?;
    let cloud = load_xyz(&a.file)?;
    let est = planar_symmetry_direction(&cloud.points, a.shells)?;
    let rep = DetectReport {
        file: a.file.display().to_string(),
        points: cloud.len(),
        shells: est.n_shells,
        c: est.direction,
        magnitude: est.magnitude,
        direction: est.unit_direction,
        degenerate: est.is_degenerate(),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
        return Ok(());
    }
    println!("points     {}", rep.points);
    println!("shells     {}", rep.shells);
    println!("c          {:?}", rep.c);
    println!("|c|        {:e}", rep.magnitude);
    match rep.direction {
        Some(u) => println!("direction  {u:?}"),
        None => println!("direction  degenerate: multi-plane/isotropic"),
    }
    Ok(())
}

fn segment_plane(a: &SegmentArgs) -> CliResult {
    echo("segment-plane", a)?;
    let cloud = load_xyz(&a.file)?;
    // The classifier splits by a plane through the origin.
    let c = centroid(&cloud.points);
    let points: Vec<_> = cloud.points.iter().map(|&p| sub(p, c)).collect();
    let seg = segment_by_plane(&points, cloud.labels.as_deref(), a.shells)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let mut s = a.file.clone().into_os_string();
        s.push(".labels.csv");
        PathBuf::from(s)
    });
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["index", "label", "on_plane"]).map_err(|e| Error::Format(e.to_string()))?;
    for (i, (l, on)) in seg.labels.iter().zip(&seg.on_plane).enumerate() {
        w.write_record([i.to_string(), l.to_string(), on.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    let u = seg.estimate.unit_direction.expect("segment_by_plane rejects degenerate input");
    println!("direction  {u:?}");
    println!("on-plane   {}", seg.on_plane.iter().filter(|&&b| b).count());
    match seg.accuracy {
        Some(acc) => println!("accuracy   {acc}"),
        None => println!("accuracy   n/a (unlabelled input)"),
    }
    println!("labels     {}", out.display());
    Ok(())
}

/// Serialized model with its configuration.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: ModelParams,
}

pub const CHECKPOINT_FORMAT: &str = "oavnn-checkpoint-v1";

pub fn load_checkpoint(path: &Path) -> CliResult<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", ck.format)).into());
    }
    ck.params.config.validate()?;
    Ok(ck.params)
}

fn train(a: &TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    echo("train", &cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;

    let train_set = cfg.data.train_set()?;
    let test_set = cfg.data.test_set()?;
    let (params, metrics) = train_with(&cfg.model, &train_set, &test_set, |r| {
        println!(
            "epoch {:>3}  train acc {:.4} loss {:.4}  test acc {:.4} loss {:.4}",
            r.epoch, r.train_accuracy, r.train_loss, r.test_accuracy, r.test_loss
        );
    })?;

    write_metrics_csv(&cfg.out_dir.join(METRICS_FILE), &metrics)?;
    let summary = RunSummary {
        variant: cfg.model.variant.to_string(),
        final_test_accuracy: metrics.final_test_accuracy(),
        epochs_to_90: metrics.epochs_to(0.9),
        epochs: metrics.records.len(),
        seed: cfg.model.seed,
        wall_time_secs: metrics.wall_time_secs,
    };
    std::fs::write(cfg.out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        params,
    };
    std::fs::write(cfg.out_dir.join(CHECKPOINT_FILE), serde_json::to_string(&ck)?)?;
    match summary.final_test_accuracy {
        Some(acc) => println!("final test accuracy {acc}"),
        None => println!("no epochs run"),
    }
    println!("run written to {}", cfg.out_dir.display());
    Ok(())
}

fn eval_data(path: &Path) -> CliResult<Vec<PointCloud>> {
    if path.extension().is_some_and(|x| x == "json") {
        Ok(RunConfig::load(path)?.data.test_set()?)
    } else {
        Ok(load_dir(path)?)
    }
}

fn eval(a: &EvalArgs) -> CliResult {
    echo("eval", a)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let set = eval_data(&a.data)?;
    let prepared = prepare_test_set(&params.config, &set)?;
    let (acc, loss) = evaluate_prepared(&params, &prepared)?;
    println!("clouds {}", set.len());
    println!("accuracy {acc}");
    println!("loss {loss}");
    Ok(())
}

fn check_equivariance(a: &EquivarianceArgs) -> CliResult {
    echo("check-equivariance", a)?;
    let stages = if a.stage == "all" {
        Stage::all()
    } else {
        vec![Stage::parse(&a.stage).ok_or_else(|| {
            let names: Vec<String> = Stage::all().iter().map(Stage::name).collect();
            Error::Config(format!("unknown stage {:?}; expected all or one of {}", a.stage, names.join(", ")))
        })?]
    };
    println!(
        "{:<20} {:<13} {:>6} {:>10} {:>10}  result",
        "stage", "expected", "trials", "max error", "bound"
    );
    let mut failed = Vec::new();
    for st in stages {
        let r = equivariance_probe(st, a.trials, a.improper, a.seed)?;
        let ok = r.passes(a.tolerance, a.sensitivity);
        let (bound, verdict) = match (r.expected, ok) {
            (Behavior::Sensitive, true) => (format!(">{:.0e}", a.sensitivity), "sensitive (expected)"),
            (Behavior::Sensitive, false) => (format!(">{:.0e}", a.sensitivity), "FAIL"),
            (_, true) => (format!("<{:.0e}", a.tolerance), "pass"),
            (_, false) => (format!("<{:.0e}", a.tolerance), "FAIL"),
        };
        println!(
            "{:<20} {:<13} {:>6} {:>10.2e} {:>10}  {verdict}",
            r.stage,
            r.expected.to_string(),
            r.trials,
            r.max_error,
            bound
        );
        if !ok {
            failed.push(r.stage);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("equivariance check failed for {}", failed.join(", "))))
    }
}

fn check_gradients(a: &GradientArgs) -> CliResult {
    echo("check-gradients", a)?;
    let layers: Vec<&str> = if a.layer == "all" {
        GRADIENT_LAYERS.to_vec()
    } else {
        vec![a.layer.as_str()]
    };
    println!("{:<16} {:>12} {:>10}  result   (step {GRADIENT_STEP:e})", "layer", "max rel err", "bound");
    let mut failed = Vec::new();
    for layer in layers {
        let e = layer_gradient_check(layer, a.seed)?;
        let ok = e <= a.tolerance;
        println!(
            "{layer:<16} {e:>12.2e} {:>10}  {}",
            format!("<={:.0e}", a.tolerance),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(layer);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn report(a: &ReportArgs) -> CliResult {
    echo("report", a)?;
    let dirs = find_runs(&a.runs)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no {METRICS_FILE} found under {}", a.runs.display())).into());
    }
    let runs = dirs.iter().map(|d| RunCurves::load(d)).collect::<oavnn::Result<Vec<_>>>()?;
    std::fs::write(&a.out, render_svg(&runs))?;
    let summary = summarize(&runs);
    let summary_path = a.summary.clone().unwrap_or_else(|| a.out.with_extension("json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    for s in &summary {
        let e90 = s.epochs_to_90.map_or("never".to_string(), |e| format!("{e:.2}"));
        println!(
            "{:<12} runs {}  final test accuracy {:.4}  epochs to 90% {e90}",
            s.variant, s.runs, s.final_test_accuracy
        );
    }
    println!("wrote {} and {}", a.out.display(), summary_path.display());
    Ok(())
}
