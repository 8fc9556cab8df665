//! `ect`: train shape models, synthesize scenarios, fit and evaluate.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or malformed input,
//! 3 insufficient training data, 4 landmark-count mismatch, 5 degenerate initialization.

mod overrides;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ect_core::metrics::{EvalItem, EvalOptions, EvalReport};
use ect_core::pdm::ComponentSelection;
use ect_core::pts::{format_pts, read_pts};
use ect_core::response::{encode_rspm, load_rspm};
use ect_core::synth::{format_meta, parse_meta, ScenarioMeta};
use ect_core::{
    fit, make_training_shapes, sample_scenario, train_pdm, Error, FitConfig, FitResult,
    GeneratorSpec, PointDistributionModel, ScenarioConfig, Shape, TrainOptions,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ect",
    version,
    about = "Landmark shape fitting on response maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a point distribution model from a directory of .pts files.
    TrainPdm(TrainArgs),
    /// Write a synthetic scenario, or a training corpus with --shapes.
    Synth(SynthArgs),
    /// Fit a model to a response stack.
    Fit(FitArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .pts files.
    #[arg(long)]
    shapes: PathBuf,
    #[arg(long, conflicts_with = "components")]
    variance_retained: Option<f64>,
    /// Exact number of deformation modes.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Model to sample a scenario from.
    #[arg(long, required_unless_present_any = ["shapes", "dump_config"])]
    model: Option<PathBuf>,
    /// Write this many training shapes from the reference generator instead.
    #[arg(long, conflicts_with = "model")]
    shapes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective scenario config and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, required_unless_present = "dump_config")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    stack: Option<PathBuf>,
    /// Fit config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from `FitConfig::occlusion_sensitive()` instead of the defaults.
    #[arg(long)]
    occlusion_sensitive: bool,
    /// Print the effective fit config and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction: a fit result document or a .pts file.
    #[arg(long, requires = "truth", conflicts_with = "batch")]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Scenario meta file; occluded landmarks are excluded from the errors.
    #[arg(long, conflicts_with = "batch")]
    meta: Option<PathBuf>,
    /// Directory of scenario directories, each holding truth.pts, meta and fit.json.
    #[arg(long, required_unless_present_any = ["pred", "dump_config"])]
    batch: Option<PathBuf>,
    /// Evaluation option override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dump_config: bool,
    /// Report document.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Two-column CED table.
    #[arg(long)]
    ced: Option<PathBuf>,
}

/// A failed command with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn at(path: &Path, e: Error) -> Self {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Format { .. }
            | Error::UnsupportedVersion { .. }
            | Error::InvalidShape(_)
            | Error::NonFinite(_)
            | Error::InvalidConfig(_)
            | Error::Json(_) => 2,
            Error::InsufficientData(_) => 3,
            Error::LandmarkCountMismatch { .. } | Error::DimensionMismatch { .. } => 4,
            Error::InitDegenerate(_) => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainPdm(a) => train_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Writes through a temporary file in the target directory and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::from(e.error))?;
    Ok(())
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{}: no such file", path.display())))
    }
}

fn dump<T: Serialize>(config: &T) -> CmdResult {
    let text = ect_core::doc::to_precise_json(config).map_err(Error::from)?;
    print!("{text}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    if !a.shapes.is_dir() {
        return Err(Failure::usage(format!(
            "{}: not a directory",
            a.shapes.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.shapes)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pts"))
        .collect();
    paths.sort();
    let mut shapes: Vec<Shape> = Vec::with_capacity(paths.len());
    for p in &paths {
        let s = read_pts(p).map_err(|e| Failure::at(p, e))?;
        if let Some(first) = shapes.first() {
            if first.n() != s.n() {
                return Err(Failure::usage(format!(
                    "{}: {} landmarks, expected {} as in {}",
                    p.display(),
                    s.n(),
                    first.n(),
                    paths[0].display()
                )));
            }
        }
        shapes.push(s);
    }
    let selection = match (a.components, a.variance_retained) {
        (Some(k), _) => ComponentSelection::Count(k),
        (None, Some(f)) => ComponentSelection::VarianceRetained(f),
        (None, None) => ComponentSelection::default(),
    };
    let model = train_pdm(
        &shapes,
        &TrainOptions {
            selection,
            ..TrainOptions::default()
        },
    )?;
    write_atomic(&a.out, model.to_json()?.as_bytes())?;
    println!(
        "n = {}, m = {}, retained variance = {:.6}",
        model.n(),
        model.m(),
        model.retained_variance()
    );
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> CmdResult {
    let mut cfg =
        overrides::apply(&ScenarioConfig::default(), &a.overrides).map_err(Failure::usage)?;
    cfg.seed = a.seed;
    if a.dump_config {
        return dump(&cfg);
    }
    cfg.validate()?;
    let out = a.out.expect("required by clap");

    let files: Vec<(PathBuf, Vec<u8>)> = if let Some(count) = a.shapes {
        let set = make_training_shapes(&GeneratorSpec::face68_reference(a.seed), count)?;
        let width = count.to_string().len().max(4);
        set.shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (
                    out.join(format!("shape_{k:0width$}.pts")),
                    format_pts(s).into_bytes(),
                )
            })
            .collect()
    } else {
        let path = a.model.expect("required by clap");
        require_file(&path)?;
        let model = PointDistributionModel::load(&path).map_err(|e| Failure::at(&path, e))?;
        let sc = sample_scenario(&model, &cfg)?;
        vec![
            (out.join("truth.pts"), format_pts(&sc.truth).into_bytes()),
            (out.join("stack.rspm"), encode_rspm(&sc.stack)),
            (
                out.join("meta"),
                format_meta(&ScenarioMeta::new(a.seed, &sc)).into_bytes(),
            ),
        ]
    };
    fs::create_dir_all(&out)?;
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn fit_cmd(a: FitArgs) -> CmdResult {
    let base = if a.occlusion_sensitive {
        FitConfig::occlusion_sensitive()
    } else {
        FitConfig::default()
    };
    let cfg = overrides::apply(&base, &a.overrides).map_err(Failure::usage)?;
    if a.dump_config {
        return dump(&cfg);
    }
    cfg.validate()?;
    let (model_path, stack_path) = (
        a.model.expect("required by clap"),
        a.stack.expect("required by clap"),
    );
    require_file(&model_path)?;
    require_file(&stack_path)?;
    let out = a.out.expect("required by clap");
    let model =
        PointDistributionModel::load(&model_path).map_err(|e| Failure::at(&model_path, e))?;
    let stack = load_rspm(&stack_path).map_err(|e| Failure::at(&stack_path, e))?;
    let res = fit(&model, &stack, &cfg)?;
    write_atomic(&out, res.to_json()?.as_bytes())?;
    let occluded = res.occlusion_flags.iter().filter(|&&f| f).count();
    println!(
        "{} iterations, converged: {}, {} of {} landmarks flagged occluded",
        res.trace.len(),
        res.converged,
        occluded,
        res.shape.n()
    );
    Ok(())
}

/// Fit result document or bare .pts file.
fn load_prediction(path: &Path) -> Result<(Shape, Option<Vec<f64>>), Failure> {
    require_file(path)?;
    if path.extension().is_some_and(|x| x == "pts") {
        return Ok((read_pts(path).map_err(|e| Failure::at(path, e))?, None));
    }
    let res = FitResult::load(path).map_err(|e| Failure::at(path, e))?;
    Ok((res.shape, Some(res.weights)))
}

fn load_item(pred: &Path, truth: &Path, meta: Option<&Path>) -> Result<EvalItem, Failure> {
    let (pred, weights) = load_prediction(pred)?;
    require_file(truth)?;
    let truth_shape = read_pts(truth).map_err(|e| Failure::at(truth, e))?;
    let occluded = match meta {
        Some(m) => {
            require_file(m)?;
            let text = fs::read_to_string(m)?;
            let meta = parse_meta(&text).map_err(|e| Failure::at(m, e))?;
            if meta.n != truth_shape.n() {
                return Err(Failure::at(
                    m,
                    Error::LandmarkCountMismatch {
                        expected: truth_shape.n(),
                        found: meta.n,
                    },
                ));
            }
            Some(meta.occlusion_mask())
        }
        None => None,
    };
    if pred.n() != truth_shape.n() {
        return Err(Failure::at(
            truth,
            Error::LandmarkCountMismatch {
                expected: pred.n(),
                found: truth_shape.n(),
            },
        ));
    }
    Ok(EvalItem {
        pred,
        truth: truth_shape,
        weights: weights.filter(|_| occluded.is_some()),
        occluded,
    })
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let opts = overrides::apply(&EvalOptions::default(), &a.overrides).map_err(Failure::usage)?;
    if a.dump_config {
        return dump(&opts);
    }
    let items = if let Some(root) = &a.batch {
        if !root.is_dir() {
            return Err(Failure::usage(format!(
                "{}: not a directory",
                root.display()
            )));
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        dirs.iter()
            .map(|d| {
                let meta = d.join("meta");
                let meta = meta.is_file().then_some(meta);
                load_item(&d.join("fit.json"), &d.join("truth.pts"), meta.as_deref())
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let pred = a.pred.as_deref().expect("required by clap");
        let truth = a
            .truth
            .as_deref()
            .ok_or_else(|| Failure::usage("--truth is required with --pred"))?;
        vec![load_item(pred, truth, a.meta.as_deref())?]
    };
    let report = EvalReport::build(&items, &opts)?;
    if let Some(out) = &a.out {
        write_atomic(out, report.to_json()?.as_bytes())?;
    }
    if let Some(ced) = &a.ced {
        write_atomic(ced, report.ced_table().as_bytes())?;
    }
    println!(
        "images = {}, mean NME = {:.6}, MAPE = {:.4} px, AUC@{} = {:.4}, failure rate = {:.4}",
        items.len(),
        report.mean_nme,
        report.mape,
        report.cutoff,
        report.auc,
        report.failure_rate
    );
    if let (Some(p), Some(r)) = (report.occlusion_precision, report.occlusion_recall) {
        println!("occlusion precision = {p:.4}, recall = {r:.4}");
    }
    Ok(())
}
