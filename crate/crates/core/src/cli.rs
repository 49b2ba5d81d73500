//! Command-line front end.
//!
//! Exit codes: 0 success, 2 attack infeasible or a reconstruction failed,
//! 3 file or format error, 4 bad arguments.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::attack::{AttackError, AttackOptions, LayerSolve, LayerStrategy};
use crate::eval::{evaluate, run_attack, write_eval_csv, AttackMode, EvalConfig};
use crate::feasibility::analyze;
use crate::io::{
    capture_from_entries, capture_to_entries, load_architecture, load_image, params_from_entries,
    params_to_entries, read_tensor_container, save_image, write_tensor_container, IoError,
};
use crate::metrics::{match_pairs, MetricRecord, DEFAULT_SUCCESS_MSE};
use crate::network::{
    init_parameters, loss_and_gradients, ActivationKind, Architecture, NetworkError, Parameters,
};
use crate::tensor::{Shape3, Tensor, TensorError, DEFAULT_RANK_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_FILE: i32 = 3;
pub const EXIT_USAGE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "gleak",
    version,
    about = "Closed-form gradient inversion for small CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write randomly initialized parameters.
    InitParams(InitParamsArgs),
    /// Run the victim forward and backward pass and write the gradient capture.
    Simulate(SimulateArgs),
    /// Reconstruct inputs from a gradient capture.
    Attack(AttackArgs),
    /// Count constraints and, given a capture, measure system ranks.
    Analyze(AnalyzeArgs),
    /// Run randomized attack trials and write a CSV table.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Architecture config file or preset name (lenet, lenet-x, lenet-ex, cnn6, cnn6-x).
    #[arg(long)]
    arch: String,
    /// Replace every conv activation.
    #[arg(long)]
    activation: Option<ActivationKind>,
    /// Replace the input shape, as HxWxC.
    #[arg(long, value_parser = parse_shape)]
    input_shape: Option<Shape3>,
    /// Replace the number of classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct InitParamsArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    params: PathBuf,
    /// PNG images or tensor containers of (H, W, C) images.
    #[arg(long, value_delimiter = ',', required = true)]
    input: Vec<PathBuf>,
    /// One label per image.
    #[arg(long, value_delimiter = ',', required = true)]
    label: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    capture: PathBuf,
    #[arg(long, default_value = "single")]
    mode: AttackMode,
    /// Hybrid mode: `auto`, or one of g/p/auto per conv layer (comma separated).
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<LayerStrategy>,
    /// Minimum usable bias-gradient magnitude (default 1e-8 * max |db|).
    #[arg(long)]
    b_threshold: Option<f64>,
    /// Relative singular-value cutoff.
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    tol: f64,
    /// Original images, to report MSE and PSNR.
    #[arg(long, value_delimiter = ',')]
    truth: Vec<PathBuf>,
    /// MSE bound for counting a reconstruction as matching a truth.
    #[arg(long, default_value_t = DEFAULT_SUCCESS_MSE)]
    mse_threshold: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, requires = "capture")]
    params: Option<PathBuf>,
    #[arg(long, requires = "params")]
    capture: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    tol: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Number of trials.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single")]
    mode: AttackMode,
    /// Batch size (default 1, or 8 in minibatch mode).
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SUCCESS_MSE)]
    mse_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    tol: f64,
    /// Write 0 in the time column so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected HxWxC, got {s:?}"))?;
    match dims[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Shape3::new(h, w, c)),
        _ => Err(format!("expected three positive sizes HxWxC, got {s:?}")),
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io(_) => EXIT_FILE,
            Self::Attack(AttackError::Tensor(_) | AttackError::Network(_)) => EXIT_FILE,
            Self::Attack(_) | Self::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::InvalidLabel { .. } | NetworkError::InvalidArchitecture(_) => {
                Self::Usage(e.to_string())
            }
            other => Self::Io(IoError::Network(other)),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Io(IoError::Tensor(e))
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::InitParams(a) => init_params(a),
        Command::Simulate(a) => simulate(a),
        Command::Attack(a) => attack(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_arch(a: &ArchArgs) -> Result<Architecture, CliError> {
    let mut arch = load_architecture(&a.arch)?;
    if let Some(kind) = a.activation {
        arch = arch.with_activation(kind);
    }
    if let Some(shape) = a.input_shape {
        arch = arch.with_input(shape)?;
    }
    if let Some(classes) = a.classes {
        arch = arch.with_classes(classes)?;
    }
    Ok(arch)
}

fn load_params(arch: &Architecture, path: &Path) -> Result<Parameters, CliError> {
    Ok(params_from_entries(arch, &read_tensor_container(path)?)?)
}

fn check_tol(tol: f64) -> Result<(), CliError> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--tol must be positive, got {tol}"
        )))
    }
}

/// Reads PNG files and tensor containers into `(H, W, C)` images.
fn load_images(paths: &[PathBuf], expected: Shape3) -> Result<Vec<Tensor>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let images: Vec<Tensor> = if is_png {
            vec![load_image(path)?]
        } else {
            read_tensor_container(path)?
                .into_iter()
                .map(|(_, t)| t)
                .collect()
        };
        for img in images {
            if img.shape() != expected.hwc() {
                return Err(IoError::Image(format!(
                    "{}: image of shape {:?} does not match the architecture input {:?}",
                    path.display(),
                    img.shape(),
                    expected.hwc()
                ))
                .into());
            }
            out.push(img);
        }
    }
    Ok(out)
}

fn stack_images(images: &[Tensor], shape: Shape3) -> Result<Tensor, CliError> {
    let data: Vec<f64> = images
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::new(
        vec![images.len(), shape.height, shape.width, shape.channels],
        data,
    )?)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(IoError::Config)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|source| IoError::File {
            path: p.to_path_buf(),
            source,
        })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn init_params(a: InitParamsArgs) -> Result<i32, CliError> {
    let arch = resolve_arch(&a.arch)?;
    let params = init_parameters(&arch, a.seed);
    write_tensor_container(&a.out, &params_to_entries(&params))?;
    println!(
        "wrote {} parameters of {} to {}",
        params.count(),
        arch.name,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn simulate(a: SimulateArgs) -> Result<i32, CliError> {
    let arch = resolve_arch(&a.arch)?;
    let params = load_params(&arch, &a.params)?;
    let images = load_images(&a.input, arch.input)?;
    if images.len() != a.label.len() {
        return Err(CliError::Usage(format!(
            "{} images but {} labels",
            images.len(),
            a.label.len()
        )));
    }
    let batch = stack_images(&images, arch.input)?;
    let (loss, capture) = loss_and_gradients(&arch, &params, &batch, &a.label)?;
    write_tensor_container(&a.out, &capture_to_entries(&capture))?;
    println!(
        "batch of {} examples, mean loss {loss:.6}; wrote {}",
        images.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct AttackReport {
    architecture: String,
    mode: AttackMode,
    succeeded: bool,
    wall_time_s: f64,
    inferred_labels: Vec<Option<usize>>,
    reconstructions: Vec<ReconstructionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<TruthReport>,
}

#[derive(Debug, Serialize)]
struct ReconstructionReport {
    index: usize,
    label: Option<usize>,
    succeeded: bool,
    fc_row: usize,
    fc_cross_check: Option<(usize, f64)>,
    layers: Vec<LayerSolve>,
    diagnostics: Vec<String>,
    png: Option<String>,
    /// Against the matched truth, when truths were given.
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matched_truth: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TruthReport {
    count: usize,
    mse_threshold: f64,
    success_count: usize,
}

fn attack(a: AttackArgs) -> Result<i32, CliError> {
    let arch = resolve_arch(&a.arch)?;
    check_tol(a.tol)?;
    if let Some(t) = a.b_threshold {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(CliError::Usage(format!(
                "--b-threshold must be nonnegative, got {t}"
            )));
        }
    }
    if !a.strategy.is_empty() && a.mode != AttackMode::Hybrid {
        return Err(CliError::Usage(
            "--strategy applies to hybrid mode only".into(),
        ));
    }
    let params = load_params(&arch, &a.params)?;
    let capture = capture_from_entries(&arch, &read_tensor_container(&a.capture)?)?;
    let truths = load_images(&a.truth, arch.input)?;
    fs::create_dir_all(&a.out).map_err(|source| IoError::File {
        path: a.out.clone(),
        source,
    })?;
    let opts = AttackOptions {
        rank_tol: a.tol,
        b_threshold: a.b_threshold,
        ..AttackOptions::default()
    };
    let start = Instant::now();
    let result = run_attack(a.mode, &arch, &params, &capture, &a.strategy, &opts)?;
    let elapsed = start.elapsed().as_secs_f64();

    let pngable = matches!(arch.input.channels, 1 | 3);
    let mut entries = Vec::new();
    let mut recs = Vec::new();
    for (i, r) in result.reconstructions.iter().enumerate() {
        let png = if pngable {
            let name = format!("recon_{i}.png");
            save_image(&r.input, &a.out.join(&name))?;
            Some(name)
        } else {
            None
        };
        entries.push((format!("recon_{i}"), r.input.clone()));
        recs.push(ReconstructionReport {
            index: i,
            label: r.label,
            succeeded: r.succeeded,
            fc_row: r.fc_row,
            fc_cross_check: r.fc_cross_check,
            layers: r.layers.clone(),
            diagnostics: r.diagnostics.clone(),
            png,
            metrics: None,
            matched_truth: None,
        });
    }
    write_tensor_container(&a.out.join("reconstruction.gleak"), &entries)?;

    let truth = if truths.is_empty() {
        None
    } else {
        let pairs = match_pairs(&result.inputs(), &truths);
        for &(i, j, _) in &pairs {
            let r = &result.reconstructions[i];
            recs[i].metrics = Some(MetricRecord::compare(&truths[j], &r.input, elapsed)?);
            recs[i].matched_truth = Some(j);
        }
        Some(TruthReport {
            count: truths.len(),
            mse_threshold: a.mse_threshold,
            success_count: pairs.iter().filter(|p| p.2 <= a.mse_threshold).count(),
        })
    };
    let succeeded = !result.reconstructions.is_empty() && result.all_succeeded();
    let report = AttackReport {
        architecture: arch.name.clone(),
        mode: a.mode,
        succeeded,
        wall_time_s: elapsed,
        inferred_labels: result.inferred_labels(),
        reconstructions: recs,
        truth,
    };
    write_json(&report, Some(&a.out.join("report.json")))?;
    for r in &report.reconstructions {
        let quality = r
            .metrics
            .map(|m| format!(", mse {:.3e}", m.mse))
            .unwrap_or_default();
        println!(
            "recon_{}: {}{quality}",
            r.index,
            if r.succeeded { "ok" } else { "failed" }
        );
    }
    if succeeded {
        Ok(EXIT_OK)
    } else {
        Err(CliError::Failed(format!(
            "reconstruction incomplete; see {}",
            a.out.join("report.json").display()
        )))
    }
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<i32, CliError> {
    let arch = resolve_arch(&a.arch)?;
    check_tol(a.tol)?;
    let observed = match (&a.params, &a.capture) {
        (Some(p), Some(c)) => {
            let params = load_params(&arch, p)?;
            let capture = capture_from_entries(&arch, &read_tensor_container(c)?)?;
            Some((params, capture))
        }
        _ => None,
    };
    let report = analyze(&arch, observed.as_ref().map(|(p, c)| (p, c)), a.tol)?;
    write_json(&report, a.out.as_deref())?;
    if a.out.is_some() {
        println!(
            "{}: {}",
            arch.name,
            if report.feasible {
                "feasible"
            } else {
                "infeasible"
            }
        );
    }
    Ok(EXIT_OK)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<i32, CliError> {
    let arch = resolve_arch(&a.arch)?;
    check_tol(a.tol)?;
    let mut cfg = EvalConfig::new(a.mode, a.n, a.seed);
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if cfg.batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    if cfg.batch != 1 && a.mode != AttackMode::Minibatch {
        return Err(CliError::Usage(format!(
            "{} mode reconstructs single examples; --batch must be 1",
            a.mode
        )));
    }
    cfg.mse_threshold = a.mse_threshold;
    cfg.timing = !a.no_timing;
    cfg.options.rank_tol = a.tol;
    let rows = evaluate(&arch, &cfg)?;
    let mut bytes = Vec::new();
    write_eval_csv(&rows, &mut bytes)?;
    fs::write(&a.out, bytes).map_err(|source| IoError::File {
        path: a.out.clone(),
        source,
    })?;
    let found: usize = rows.iter().map(|r| r.success_count).sum();
    println!(
        "{} trials, {found} of {} examples recovered; wrote {}",
        rows.len(),
        rows.len() * cfg.batch,
        a.out.display()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_argument() {
        assert_eq!(parse_shape("32x16x3").unwrap(), Shape3::new(32, 16, 3));
        assert!(parse_shape("32x16").is_err());
        assert!(parse_shape("0x1x1").is_err());
        assert!(parse_shape("axbxc").is_err());
    }

    #[test]
    fn usage_errors_exit_four() {
        assert_eq!(run(["gleak"]), EXIT_USAGE);
        assert_eq!(run(["gleak", "attack", "--arch", "lenet"]), EXIT_USAGE);
        assert_eq!(run(["gleak", "--help"]), EXIT_OK);
    }
}
