//! The `hfwave` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.
//! Every file a subcommand writes goes under `--out-dir`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{self, ScalingConfig};
use crate::error::{Error, Result};
use crate::harness::{self, GradTarget, TrainConfig, GRADCHECK_TOLERANCE};
use crate::hfqe::{self, QuantizationConfig};
use crate::numerics::{io, Tensor};
use crate::wavelet;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const ENERGY_FILE: &str = "energy.txt";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(
    name = "hfwave",
    version,
    about = "Haar-wavelet high-frequency augmentation and multi-wave mixing",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multi-level Haar transform of an image or tensor file.
    Dwt(DwtArgs),
    /// Quantize the LL subband and reconstruct; also write the detail subbands.
    Hfqe(HfqeArgs),
    /// Finite-difference gradient check of a differentiable component.
    Gradcheck(GradcheckArgs),
    /// Train the toy cascade on synthetic identities.
    Train(TrainArgs),
    /// Retrieval metrics for a trained checkpoint.
    Eval(EvalArgs),
    /// Scaling study of multi-wave mixing against quadratic attention.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Directory for every output file.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DwtArgs {
    /// Input PGM (P5) or tensor file.
    #[arg(long)]
    pub input: PathBuf,
    /// Decomposition levels.
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct HfqeArgs {
    /// Input PGM (P5) or tensor file.
    #[arg(long)]
    pub input: PathBuf,
    /// LL quantization interval.
    #[arg(long, default_value_t = hfqe::DEFAULT_Q)]
    pub q: f64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One of mixing, encoder, lp, oim, detection, or all.
    #[arg(long)]
    pub target: String,
    /// Seed for inputs and parameters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model and data seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps [default: 500].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Fraction of tokens kept by top-K selection [default: 0.3].
    #[arg(long)]
    pub k: Option<f64>,
    /// Proxy momentum lambda: v <- lambda v + (1 - lambda) x [default: 0.5].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// LL quantization interval [default: 15].
    #[arg(long)]
    pub q: Option<f64>,
    /// Weight of the high-frequency proxy loss [default: 0.03].
    #[arg(long)]
    pub lambda_p: Option<f64>,
    /// Disable high-frequency quantization enhancement.
    #[arg(long)]
    pub no_hfqe: bool,
    /// Extra key=value overrides, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train` [default: <out-dir>/checkpoint].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Token counts; perfect squares with even sides.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
    pub sizes: Vec<usize>,
    /// Channels per token.
    #[arg(long, default_value_t = bench::DEFAULT_CHANNELS)]
    pub channels: usize,
    /// Attention heads.
    #[arg(long, default_value_t = bench::DEFAULT_HEADS)]
    pub heads: usize,
    /// Timed repetitions per size (at least 20).
    #[arg(long, default_value_t = bench::MIN_REPETITIONS)]
    pub reps: usize,
    /// Report file name, relative to the output directory.
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Seed for weights and inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for every output file.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Parses `argv` (including the program name) and runs the subcommand,
/// writing normal output to `stdout` and diagnostics to `stderr`.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli.command, stdout) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(
                stderr,
                "error: {msg}\n\nFor more information, try '--help'."
            );
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<i32, Failure>;

fn run(command: Command, stdout: &mut dyn Write) -> Outcome {
    match command {
        Command::Dwt(a) => run_dwt(&a, stdout),
        Command::Hfqe(a) => run_hfqe(&a, stdout),
        Command::Gradcheck(a) => run_gradcheck(&a, stdout),
        Command::Train(a) => run_train(&a, stdout),
        Command::Eval(a) => run_eval(&a, stdout),
        Command::Bench(a) => run_bench(&a, stdout),
    }
}

fn read_input(path: &Path) -> Result<Tensor> {
    Ok(io::read_any(path)?.cast())
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    io::write_tensor(path, &t.cast())
}

/// Writes `NAME.htns` per subband plus the energy report. Detail subbands are
/// suffixed with their level; only the coarsest LL is kept.
fn run_dwt(a: &DwtArgs, stdout: &mut dyn Write) -> Outcome {
    let x = read_input(&a.input)?;
    let (h, w, _) = x.hwc()?;
    let depth = wavelet::max_depth(h, w);
    if a.levels == 0 || a.levels > depth {
        return Err(Failure::Usage(format!(
            "--levels must be between 1 and {depth} for a {h}x{w} input, got {}",
            a.levels
        )));
    }
    fs::create_dir_all(&a.out.out_dir)?;
    let mut bands: Vec<(String, Tensor)> = Vec::new();
    let mut current = x;
    for level in 1..=a.levels {
        let s = wavelet::forward(&current)?;
        for (name, band) in wavelet::SUBBAND_NAMES.iter().zip(s.bands()).skip(1) {
            bands.push((format!("{name}{level}"), band.clone()));
        }
        current = s.ll;
    }
    bands.push((format!("LL{}", a.levels), current));
    let mut report = String::new();
    for (name, band) in &bands {
        write_f32(&a.out.out_dir.join(format!("{name}.htns")), band)?;
        report.push_str(&format!("{name} sum_sq={}\n", band.sum_sq()));
    }
    fs::write(a.out.out_dir.join(ENERGY_FILE), &report)?;
    write!(stdout, "{report}")?;
    Ok(EXIT_OK)
}

fn run_hfqe(a: &HfqeArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = QuantizationConfig::new(a.q).map_err(|e| Failure::Usage(e.to_string()))?;
    let x = read_input(&a.input)?;
    let enhanced = hfqe::hfqe_enhance(&x, cfg)?;
    let hf = hfqe::concat_hf(&x)?;
    fs::create_dir_all(&a.out.out_dir)?;
    write_f32(&a.out.out_dir.join("enhanced.htns"), &enhanced)?;
    write_f32(&a.out.out_dir.join("hf.htns"), &hf)?;
    let (low, high) = hfqe::band_energies(&enhanced)?;
    writeln!(stdout, "q={}", cfg.q())?;
    writeln!(stdout, "LL sum_sq={low}")?;
    writeln!(stdout, "HF sum_sq={high}")?;
    Ok(EXIT_OK)
}

fn run_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> Outcome {
    let targets: Vec<GradTarget> = if a.target == "all" {
        GradTarget::ALL.to_vec()
    } else {
        vec![a
            .target
            .parse()
            .map_err(|e: Error| Failure::Usage(e.to_string()))?]
    };
    let mut ok = true;
    for t in targets {
        let err = harness::gradcheck_target(t, a.seed)?;
        let pass = err <= GRADCHECK_TOLERANCE;
        ok &= pass;
        writeln!(
            stdout,
            "{t} max_rel_err={err:.3e} {}",
            if pass { "ok" } else { "FAIL" }
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let usage = |e: Error| Failure::Usage(e.to_string());
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.k {
        cfg.k_ratio = v;
    }
    if let Some(v) = a.lambda {
        cfg.proxy_momentum = v;
    }
    if let Some(v) = a.q {
        cfg.q = v;
    }
    if let Some(v) = a.lambda_p {
        cfg.lambda_p = v;
    }
    if a.no_hfqe {
        cfg.hfqe = false;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_metrics(dir: &Path, m: &harness::RetrievalMetrics, stdout: &mut dyn Write) -> Result<()> {
    fs::write(dir.join(METRICS_FILE), m.report())?;
    write!(stdout, "{}", m.report())?;
    Ok(())
}

fn run_train(a: &TrainArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = train_config(a)?;
    let (trainer, out) = harness::train(&cfg, &a.out.out_dir)?;
    let metrics =
        harness::evaluate_retrieval(&trainer.model, &trainer.data.gallery, &trainer.data.query)?;
    writeln!(stdout, "losses: {}", out.losses.display())?;
    writeln!(stdout, "checkpoint: {}", out.checkpoint.display())?;
    write_metrics(&a.out.out_dir, &metrics, stdout)?;
    Ok(EXIT_OK)
}

fn run_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Outcome {
    let checkpoint = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.out.out_dir.join(harness::train::CHECKPOINT_DIR));
    let metrics = harness::evaluate_checkpoint(&checkpoint)?;
    fs::create_dir_all(&a.out.out_dir)?;
    write_metrics(&a.out.out_dir, &metrics, stdout)?;
    Ok(EXIT_OK)
}

fn run_bench(a: &BenchArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = ScalingConfig {
        sizes: a.sizes.clone(),
        channels: a.channels,
        heads: a.heads,
        reps: a.reps,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = bench::run_scaling_study(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let path = a.out_dir.join(&a.out);
    report.write_csv(&path)?;
    write!(stdout, "{}", report.to_csv())?;
    write!(stdout, "{}", report.summary())?;
    writeln!(stdout, "report: {}", path.display())?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("hfwave").chain(args.iter().copied());
        let code = dispatch(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn no_arguments_is_usage_error() {
        let (code, out, err) = call(&[]);
        assert_eq!(code, EXIT_USAGE);
        assert!(out.is_empty());
        assert!(err.contains("Usage"));
    }

    #[test]
    fn unknown_subcommand_and_flag() {
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        let (code, _, err) = call(&["gradcheck", "--target", "mixing", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bogus"));
    }

    #[test]
    fn missing_required_flag_is_named() {
        let (code, _, err) = call(&["gradcheck"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--target"));
        let (code, _, err) = call(&["dwt"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--input"));
    }

    #[test]
    fn help_exits_zero_and_documents_defaults() {
        let (code, out, _) = call(&["train", "--help"]);
        assert_eq!(code, EXIT_OK);
        for needle in ["0.3", "0.5", "15", "--out-dir"] {
            assert!(out.contains(needle), "{needle} missing from help");
        }
    }

    #[test]
    fn gradcheck_routes_and_reports() {
        let (code, out, _) = call(&["gradcheck", "--target", "oim", "--seed", "7"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.starts_with("oim max_rel_err="));
        assert_eq!(call(&["gradcheck", "--target", "nope"]).0, EXIT_USAGE);
    }

    #[test]
    fn missing_input_file_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.pgm");
        let (code, _, err) = call(&[
            "dwt",
            "--input",
            missing.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.starts_with("error:"));
    }
}
