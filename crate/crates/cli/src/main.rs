// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roisep_core::autodiff::{check_primitives, DEFAULT_EPS};
use roisep_core::cruse::{
    count_flops, count_params, load_checkpoint, separate_streaming, CruseConfig, CruseParams, StreamingSeparator,
};
use roisep_core::dsp::MultichannelBuffer;
use roisep_core::eval::{bench_rtf, pr_heatmap_many, Separator};
use roisep_core::scenegen::{generate_dataset, DatasetConfig, Region, Scenario, SourceMaterial};
use roisep_core::train::{loss_gradient_check, train_loop};
use roisep_core::wav::{read_wav, write_wav};
use roisep_core::{Error, Result};
use serde_json::json;

use config::{prefix, ModelPreset, RunConfig};

/// Frames in a 10 s clip, the reference duration for FLOP counts.
const REFERENCE_FRAMES: usize = 1001;
const PRIMITIVE_TOLERANCE: f64 = 1e-4;
const LOSS_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "roisep", version, about = "Region-of-interest speech separation with a two-microphone array")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores); never changes outputs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset for a scenario preset.
    Simulate(SimulateArgs),
    /// Train a model on a simulated dataset.
    Train(TrainArgs),
    /// Separate a stereo WAV file with a checkpoint.
    Separate(SeparateArgs),
    /// Power-reduction heatmap over a room.
    Heatmap(HeatmapArgs),
    /// Real-time factor of streaming inference.
    Bench(BenchArgs),
    /// Finite-difference checks of the gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter count and FLOPs of a model.
    Info(InfoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value = "train-simple")]
    scenario: Scenario,
    /// Fixed SIR in dB instead of the preset's draw.
    #[arg(long, allow_negative_numbers = true)]
    sir: Option<f64>,
    #[arg(long, value_enum)]
    noise: Option<Switch>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 10.0)]
    clip_seconds: f64,
    /// Directory of mono 16 kHz WAV files to use as speech instead of
    /// synthetic utterances.
    #[arg(long)]
    speech_dir: Option<PathBuf>,
    /// Directory of mono 16 kHz WAV files to use as background noise.
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory (output of `simulate`).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    /// Stereo 16 kHz WAV input.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Mono float32 WAV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Model checkpoint; only the oracle map is computed without one.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Grid spacing in metres.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialised `--model` otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
    #[arg(long, default_value_t = 100)]
    files: usize,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Also write the report as JSON here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Model for the end-to-end loss check.
    #[arg(long, value_enum, default_value = "toy")]
    model: ModelPreset,
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROISEP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = RunConfig::load(cli.config.as_deref())?;
    let seed = file.seed(cli.seed);
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("workers: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a, seed),
        Command::Train(a) => train(a, &file, seed),
        Command::Separate(a) => separate(a),
        Command::Heatmap(a) => heatmap(a, &file, seed),
        Command::Bench(a) => bench(a, &file, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Info(a) => print_info(&file.model(a.model)?),
    }
}

fn simulate(a: SimulateArgs, seed: u64) -> Result<()> {
    let mut config = DatasetConfig::new(a.scenario, a.count, seed);
    config.sir_db = a.sir;
    config.noise = a.noise.map(|s| s == Switch::On);
    config.clip_seconds = a.clip_seconds;
    if a.speech_dir.is_some() || a.noise_dir.is_some() {
        let speech_dir = a
            .speech_dir
            .ok_or_else(|| Error::Config("speech_dir: required when noise_dir is given".into()))?;
        config.material = SourceMaterial::Corpus {
            speech_dir,
            noise_dir: a.noise_dir,
        };
    }
    config.validate().map_err(|e| prefix("dataset", e))?;
    let records = generate_dataset(&config, &a.out_dir)?;
    println!("wrote {} clips of scenario {} to {}", records.len(), a.scenario, a.out_dir.display());
    Ok(())
}

fn train(a: TrainArgs, file: &RunConfig, seed: u64) -> Result<()> {
    let model = file.model(a.model)?;
    let mut config = file.train.clone().unwrap_or_default();
    config.seed = seed;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    config.validate()?;
    let outcome = train_loop(&a.data, a.val.as_deref(), &model, &config, &a.out_dir)?;
    let first = &outcome.log[0];
    let last = outcome.log.last().expect("log holds epoch 0");
    println!(
        "loss {:.2} dB -> {:.2} dB over {} epochs; best epoch {}",
        first.mean_loss_db, last.mean_loss_db, last.epoch, outcome.best_epoch
    );
    if let Some(v) = outcome.log[outcome.best_epoch].val_delta_sisdr_db {
        println!("validation delta SI-SDR at best epoch: {v:.2} dB");
    }
    println!("checkpoints in {}", a.out_dir.display());
    Ok(())
}

fn separate(a: SeparateArgs) -> Result<()> {
    let params = load_checkpoint(&a.ckpt)?;
    let y = read_wav(&a.input)?;
    let out = separate_streaming(&mut StreamingSeparator::new(&params)?, &y)?;
    write_wav(&a.out, &MultichannelBuffer::new(vec![out.samples().to_vec()])?)?;
    info!("separated {} samples into {}", y.len(), a.out.display());
    Ok(())
}

fn heatmap(a: HeatmapArgs, file: &RunConfig, seed: u64) -> Result<()> {
    let mut config = file.heatmap.clone().unwrap_or_default();
    config.seed = seed;
    if let Some(s) = a.spacing {
        config.spacing = s;
    }
    config.validate()?;
    let mut separators = vec![Separator::Oracle];
    if let Some(path) = &a.ckpt {
        separators.push(Separator::Model(load_checkpoint(path)?));
    }
    let grids = pr_heatmap_many(&separators, &config)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut summary = serde_json::Map::new();
    for (sep, grid) in separators.iter().zip(&grids) {
        let name = sep.name();
        grid.write_csv(a.out_dir.join(format!("{name}.csv")))?;
        grid.write_pgm(a.out_dir.join(format!("{name}.pgm")))?;
        let inside = grid.mean_pr(Region::InsideRoi);
        let outside = grid.mean_pr(Region::Outside);
        println!(
            "{name}: mean PR inside {} dB, outside {} dB",
            fmt_opt(inside),
            fmt_opt(outside)
        );
        summary.insert(
            name.into(),
            json!({ "mean_pr_inside_db": inside, "mean_pr_outside_db": outside, "contrast_db": grid.contrast_db() }),
        );
    }
    write_json(&a.out_dir.join("heatmap_summary.json"), &serde_json::Value::Object(summary))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn bench(a: BenchArgs, file: &RunConfig, seed: u64) -> Result<()> {
    let (params, name) = match &a.ckpt {
        Some(path) => (load_checkpoint(path)?, path.display().to_string()),
        None => {
            let model = file.model(a.model)?;
            let name = a.model.map_or("config", |m| preset_name(m)).to_string();
            (CruseParams::init(&model, &mut ChaCha8Rng::seed_from_u64(seed))?, name)
        }
    };
    let report = bench_rtf(&params, &name, a.files, a.duration, seed)?;
    println!(
        "{}: {} files x {} s, {:.4} s per file, RTF {:.4} ({})",
        report.model, report.files, report.duration_s, report.mean_seconds, report.rtf, report.host
    );
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("bench.json"), &report)?;
    }
    Ok(())
}

fn preset_name(m: ModelPreset) -> &'static str {
    match m {
        ModelPreset::Light => "light",
        ModelPreset::Heavy => "heavy",
        ModelPreset::Toy => "toy",
    }
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<()> {
    if a.coords == 0 {
        return Err(Error::Config("coords: must be at least 1".into()));
    }
    if !(a.eps > 0.0) {
        return Err(Error::Config(format!("eps: must be positive, got {}", a.eps)));
    }
    let mut failed = Vec::new();
    for (name, err) in check_primitives(seed)? {
        let ok = err < PRIMITIVE_TOLERANCE;
        println!("{:<24} {err:.3e} {}", name, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    }
    let report = loss_gradient_check(&a.model.config(), seed, a.coords, a.eps)?;
    let worst = report.worst();
    let ok = worst < LOSS_TOLERANCE;
    println!(
        "{:<24} {worst:.3e} {} ({} coordinates, {} skipped at kinks)",
        "end-to-end loss",
        if ok { "ok" } else { "FAIL" },
        report.checks.len(),
        report.skipped
    );
    if !ok {
        failed.push("end-to-end loss".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn print_info(model: &CruseConfig) -> Result<()> {
    let params = count_params(model);
    let flops = count_flops(model, REFERENCE_FRAMES);
    println!("encoder filters: {:?}", model.enc_filters);
    println!("parameters: {} ({:.2} M)", thousands(params as u64), params as f64 / 1e6);
    println!(
        "FLOPs per 10 s clip ({REFERENCE_FRAMES} frames): {} ({:.2} G)",
        thousands(flops),
        flops as f64 / 1e9
    );
    Ok(())
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
