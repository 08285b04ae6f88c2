//! `fliq` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fliq_core::datagen::{build_dataset, parse_idx, synthetic_digits, write_idx, DatasetSpec, ParamsMode, TimeGrid};
use fliq_core::io::{
    export_fpga, load_dataset, load_model, read_curves_csv, save_dataset, save_model, write_atomic, write_curves_csv,
    ModelArtifact,
};
use fliq_core::metrics::{evaluate_float, evaluate_int, fit_lifetime, EngineTag, MetricsReport};
use fliq_core::quant::{ptq_model, Bits, IntEngine, ScaleMode};
use fliq_core::training::{train_student_qat_kd, train_teacher, TrainConfig, TrainHistory};
use fliq_core::{Error, ModelConfig, Result};

#[derive(Debug, Parser)]
#[command(name = "fliq", version, about = "GRU deconvolution of fluorescence decays with quantized inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from IDX3 images.
    Gen(GenArgs),
    /// Train a float model on the mixed loss.
    Train(TrainArgs),
    /// Train a (optionally quantization-aware) student against a teacher.
    Distill(DistillArgs),
    /// Post-training quantization with activation calibration.
    Quantize(QuantizeArgs),
    /// Compute RMSE, R², L2 and DTW over a dataset.
    Eval(EvalArgs),
    /// Deconvolve curves from a CSV file.
    Infer(InferArgs),
    /// Write raw integer weights and lookup tables for hardware.
    Export(ExportArgs),
    /// Write procedurally drawn digit images as an IDX3 file.
    Digits(DigitsArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N images.
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long, default_value_t = 256)]
    gates: usize,
    #[arg(long, default_value_t = 10.0)]
    window_ns: f64,
    #[arg(long, default_value_t = 500.0)]
    peak_counts: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mono-exponential decays with this lifetime instead of bi-exponentials.
    #[arg(long)]
    mono_tau: Option<f64>,
    /// Draw all decay parameters per pixel instead of per image.
    #[arg(long)]
    per_pixel: bool,
    /// Keep at most this many records.
    #[arg(long)]
    max_records: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Teacher,
    Lite,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "teacher")]
    arch: Arch,
    /// `h1xh2` for the teacher, `h` for the lite model.
    #[arg(long, default_value = "64x16")]
    hidden: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    hidden: usize,
    /// `8`, `16` or `none`.
    #[arg(long, default_value = "8")]
    bits: String,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Signed,
    Paper,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bits: u32,
    #[arg(long, value_enum, default_value = "signed")]
    mode: ModeArg,
    #[arg(long)]
    calib: PathBuf,
    /// Calibrate on at most this many records.
    #[arg(long, default_value_t = 1024)]
    calib_records: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Float,
    Int,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "float")]
    engine: EngineArg,
    /// Per-record CSV; a JSON summary is written next to it.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tpsf: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "float")]
    engine: EngineArg,
    /// Print a fitted lifetime for each output curve.
    #[arg(long)]
    fit_lifetime: bool,
    /// Acquisition window used for lifetime fitting.
    #[arg(long, default_value_t = 10.0)]
    window_ns: f64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DigitsArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Export(a) => export(a),
        Command::Digits(a) => digits(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut images = parse_idx(&std::fs::read(&a.images)?)?;
    if let Some(n) = a.n_images {
        images.images.truncate(n);
    }
    let mut spec = DatasetSpec::new(TimeGrid::new(a.gates, a.window_ns)?, a.seed);
    spec.peak_counts = a.peak_counts;
    spec.params_mode = match (a.mono_tau, a.per_pixel) {
        (Some(tau_ns), _) => ParamsMode::Mono { tau_ns },
        (None, true) => ParamsMode::PerPixel,
        (None, false) => ParamsMode::PerImage,
    };
    let mut ds = build_dataset(&images, &spec)?;
    if let Some(n) = a.max_records {
        ds = ds.head(n);
    }
    save_dataset(&ds, &a.out)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn parse_hidden(arch: Arch, hidden: &str, seq_len: usize) -> Result<ModelConfig> {
    let parts: Vec<usize> = hidden
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse hidden sizes {hidden:?}")))?;
    let cfg = match (arch, parts.as_slice()) {
        (Arch::Teacher, [h1, h2]) => ModelConfig::teacher(*h1, *h2, seq_len),
        (Arch::Lite, [h]) => ModelConfig::lite(*h, seq_len),
        (Arch::Teacher, _) => return Err(Error::Config("teacher needs --hidden h1xh2".into())),
        (Arch::Lite, _) => return Err(Error::Config("lite needs a single --hidden size".into())),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.json");
    PathBuf::from(s)
}

fn save_history(h: &TrainHistory, out: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(h).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&history_path(out), &json)
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = parse_hidden(a.arch, &a.hidden, ds.grid.n_gates)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        mixed_alpha: a.alpha,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, history) = train_teacher(&ds, &cfg, &tc)?;
    save_model(&ModelArtifact::Float(model), Some(a.seed), &a.out)?;
    save_history(&history, &a.out)?;
    println!("wrote {} ({} epochs)", a.out.display(), history.epochs());
    Ok(())
}

fn parse_bits(s: &str) -> Result<Option<Bits>> {
    match s {
        "none" => Ok(None),
        _ => {
            let w: u32 = s
                .parse()
                .map_err(|_| Error::Config(format!("--bits must be 8, 16 or none, got {s:?}")))?;
            Ok(Some(Bits::from_width(w).map_err(|e| Error::Config(e.to_string()))?))
        }
    }
}

fn distill(a: DistillArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let teacher = load_model(&a.teacher)?.artifact.as_float()?;
    let cfg = ModelConfig::lite(a.hidden, ds.grid.n_gates);
    cfg.validate()?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        mixed_alpha: a.alpha,
        kd_beta: a.beta,
        qat_bits: parse_bits(&a.bits)?,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, history) = train_student_qat_kd(&ds, &teacher, &cfg, &tc)?;
    save_model(&ModelArtifact::Float(model), Some(a.seed), &a.out)?;
    save_history(&history, &a.out)?;
    println!("wrote {} ({} epochs)", a.out.display(), history.epochs());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let bits = Bits::from_width(a.bits).map_err(|e| Error::Config(e.to_string()))?;
    let mode = match a.mode {
        ModeArg::Signed => ScaleMode::SignedSymmetric,
        ModeArg::Paper => ScaleMode::PaperLiteral,
    };
    let loaded = load_model(&a.model)?;
    let model = loaded.artifact.as_float()?;
    let calib = load_dataset(&a.calib)?.head(a.calib_records);
    let qm = ptq_model(&model, bits, mode, &calib)?;
    save_model(&ModelArtifact::Quantized(qm), loaded.manifest.seed, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let artifact = load_model(&a.model)?.artifact;
    let ds = load_dataset(&a.data)?;
    let report: MetricsReport = match a.engine {
        EngineArg::Float => evaluate_float(&artifact.as_float()?, &ds)?,
        EngineArg::Int => evaluate_int(artifact.as_quantized()?, &ds)?,
    };
    if let Some(path) = &a.report {
        write_atomic(path, report.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(&report.summary()).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path.with_extension("json"), &json)?;
    }
    let tag = match report.engine {
        EngineTag::Float => "float",
        EngineTag::Int8 => "int8",
        EngineTag::Int16 => "int16",
    };
    println!(
        "engine {tag} records {} rmse {:.5}±{:.5} r2 {:.4}±{:.4} l2 {:.5}±{:.5} dtw {:.6}±{:.6} r2_excluded {}",
        report.len(),
        report.rmse.mean,
        report.rmse.std,
        report.r2.mean,
        report.r2.std,
        report.l2.mean,
        report.l2.std,
        report.dtw.mean,
        report.dtw.std,
        report.r2_excluded
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let artifact = load_model(&a.model)?.artifact;
    let curves = read_curves_csv(&std::fs::read_to_string(&a.tpsf)?)?;
    let seq_len = artifact.config().seq_len;
    let outputs = match a.engine {
        EngineArg::Float => {
            let m = artifact.as_float()?;
            curves.iter().map(|c| m.predict(c)).collect::<Result<Vec<_>>>()?
        }
        EngineArg::Int => {
            let engine = IntEngine::new(artifact.as_quantized()?)?;
            curves.iter().map(|c| engine.infer(c)).collect::<Result<Vec<_>>>()?
        }
    };
    write_atomic(&a.out, write_curves_csv(&outputs).as_bytes())?;
    if a.fit_lifetime {
        let grid = TimeGrid::new(seq_len, a.window_ns)?;
        println!("curve,tau_ns");
        for (i, y) in outputs.iter().enumerate() {
            match fit_lifetime(y, &grid) {
                Ok(tau) => println!("{i},{tau}"),
                Err(e) => println!("{i},NaN # {e}"),
            }
        }
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let artifact = load_model(&a.model)?.artifact;
    let manifest = export_fpga(artifact.as_quantized()?, &a.out)?;
    println!(
        "exported {} tensors and {} tables ({} bytes) to {}",
        manifest.tensors.len(),
        manifest.luts.len(),
        manifest.total_bytes,
        a.out.display()
    );
    Ok(())
}

fn digits(a: DigitsArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    write_atomic(&a.out, &write_idx(&synthetic_digits(a.n, a.seed)))?;
    println!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
}
