//! `mmsr`: degrade HR images, train the unrolled solver, super-resolve and
//! evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmsr::degradation::{add_noise, apply_h, write_taps, DegradationModel};
use mmsr::imaging::{load_png, save_png, ColorSpace, Image, IntensityRange};
use mmsr::metrics::{evaluate_pair, self_ensemble, EvalProtocol, EvalReport};
use mmsr::solver::super_resolve;
use mmsr::trainer::{
    conform, list_pngs, load_checkpoint, parse_kv_lines, save_checkpoint, train_epoch, write_atomic, Dataset,
    TrainConfig, TrainState, TRAIN_KEYS,
};
use mmsr::Error;

/// Keys a configuration file may hold besides the training keys.
const PATH_KEYS: &[&str] = &["data_dir", "checkpoint", "log", "ensemble"];

#[derive(Parser, Debug)]
#[command(name = "mmsr", version, about = "Unrolled majorization-minimization super-resolution")]
struct Cli {
    /// Plain-text key=value configuration file; command-line flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive LR images from a directory of HR PNGs.
    Degrade(DegradeArgs),
    /// Train (or initialize) a model checkpoint.
    Train(TrainArgs),
    /// Super-resolve one LR PNG with a trained checkpoint.
    Sr(SrArgs),
    /// Score SR images against ground truth (Y channel, border shaved).
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Directory of HR PNG images.
    #[arg(long)]
    hr_dir: PathBuf,
    /// Output directory for LR PNGs and manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Downscaling factor (config key `scale`).
    #[arg(long)]
    scale: Option<usize>,
    /// Standard deviation of added Gaussian noise, byte units.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Noise generator seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the downsampling/upsampling taps for one axis to this file.
    #[arg(long, value_name = "FILE")]
    dump_taps: Option<PathBuf>,
    /// HR axis length used for the tap dump (default 16 x scale).
    #[arg(long)]
    taps_len: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of HR training PNGs.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Checkpoint file to write (and read with --resume).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Line-delimited JSON training log (default: <checkpoint>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Upscaling factor.
    #[arg(long)]
    scale: Option<usize>,
    /// Unrolled solver steps.
    #[arg(long = "K", alias = "k")]
    k: Option<usize>,
    /// Feedback passes per denoiser call (1 disables feedback).
    #[arg(long)]
    fb_steps: Option<usize>,
    /// Solver steps per truncated-backpropagation window.
    #[arg(long)]
    tbptt_k: Option<usize>,
    /// Initial Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Patches per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Total epochs to reach (also when resuming).
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Any other configuration key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SrArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// LR input PNG.
    #[arg(long)]
    input: PathBuf,
    /// SR output PNG.
    #[arg(long)]
    output: PathBuf,
    /// Average the outputs over the 8 flips/rotations of the input.
    #[arg(long)]
    ensemble: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of super-resolved PNGs.
    #[arg(long)]
    sr_dir: PathBuf,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Scale factor (sets the default border).
    #[arg(long)]
    scale: Option<usize>,
    /// Pixels shaved from every side (default: the scale factor).
    #[arg(long)]
    border: Option<usize>,
    /// Score all colour channels instead of luma only.
    #[arg(long)]
    rgb: bool,
    /// Also write line-delimited JSON records to this file.
    #[arg(long, value_name = "FILE")]
    records: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidRange { .. } | Error::Validity { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Size(_) | Error::Shape(_) => 3,
            Error::NonFinite(_) | Error::MissingGradient(_) | Error::State(_) => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

/// File keys followed by flag overrides; later entries win.
struct Settings {
    pairs: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let pairs = match path {
            None => Vec::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
                parse_kv_lines(&text)?
            }
        };
        for (k, _) in &pairs {
            if !TRAIN_KEYS.contains(&k.as_str()) && !PATH_KEYS.contains(&k.as_str()) {
                return Err(config_error(format!("unknown configuration key {k:?}")));
            }
        }
        Ok(Self { pairs })
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn flag(&self, key: &str) -> Result<bool, Failure> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(config_error(format!("invalid boolean {v:?} for key {key}"))),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, Failure> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| config_error(format!("invalid value {v:?} for key {key}"))))
            .transpose()
    }

    fn train_config(&self) -> Result<TrainConfig, Failure> {
        let train: Vec<(&str, &str)> = self
            .pairs
            .iter()
            .filter(|(k, _)| TRAIN_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        Ok(TrainConfig::from_pairs(train)?)
    }
}

fn echo_config(lines: &str) {
    info!("effective configuration:\n{}", lines.trim_end());
}

fn cmd_degrade(args: DegradeArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(s) = args.scale {
        settings.set("scale", s);
    }
    if let Some(s) = args.seed {
        settings.set("seed", s);
    }
    let scale = settings.usize("scale")?.unwrap_or(2);
    let seed: u64 = settings.get("seed").map_or(Ok(0), |v| v.parse().map_err(|_| config_error("invalid seed")))?;
    let model = DegradationModel::new(scale)?.with_sigma(args.sigma)?;
    echo_config(&format!(
        "hr_dir={}\nout_dir={}\nscale={scale}\nsigma={}\nseed={seed}",
        args.hr_dir.display(),
        args.out_dir.display(),
        args.sigma
    ));
    if let Some(taps) = &args.dump_taps {
        write_taps(&model, args.taps_len.unwrap_or(16 * scale), taps)?;
        info!("wrote taps to {}", taps.display());
    }
    let inputs = list_pngs(&args.hr_dir)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::from(Error::Io { path: args.out_dir.clone(), source: e }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    let mut failures = Vec::new();
    for path in &inputs {
        let name = path.file_name().expect("listed file").to_owned();
        let out = args.out_dir.join(&name);
        let result = (|| -> mmsr::Result<(usize, usize, usize, usize)> {
            let hr = load_png::<f64>(path)?.mod_crop(scale)?;
            let lr = apply_h(&hr.pixels, &model)?;
            let lr = add_noise(&lr, model.sigma, &mut rng)?;
            let img = Image::new(lr, IntensityRange::Byte, hr.colorspace)?.quantized();
            save_png(&img, &out)?;
            Ok((hr.height(), hr.width(), img.height(), img.width()))
        })();
        match result {
            Ok((hh, hw, lh, lw)) => {
                let rec = serde_json::json!({
                    "hr": path.display().to_string(), "lr": out.display().to_string(),
                    "hr_size": [hh, hw], "lr_size": [lh, lw], "scale": scale, "sigma": model.sigma,
                });
                manifest.push_str(&rec.to_string());
                manifest.push('\n');
            }
            Err(e) => {
                eprintln!("failed: {}: {e}", path.display());
                failures.push(path.display().to_string());
            }
        }
    }
    write_atomic(&args.out_dir.join("manifest.jsonl"), manifest.as_bytes())?;
    info!("degraded {} of {} images", inputs.len() - failures.len(), inputs.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(data_error(format!("{} file(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

fn cmd_train(args: TrainArgs, mut settings: Settings) -> Result<(), Failure> {
    let flags: [(&str, Option<String>); 11] = [
        ("data_dir", args.data_dir.map(|p| p.display().to_string())),
        ("checkpoint", args.checkpoint.map(|p| p.display().to_string())),
        ("log", args.log.map(|p| p.display().to_string())),
        ("scale", args.scale.map(|v| v.to_string())),
        ("K", args.k.map(|v| v.to_string())),
        ("fb_steps", args.fb_steps.map(|v| v.to_string())),
        ("tbptt_k", args.tbptt_k.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            settings.set(k, v);
        }
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_error(format!("--set expects key=value, got {kv:?}")))?;
        if !TRAIN_KEYS.contains(&k) && !PATH_KEYS.contains(&k) {
            return Err(config_error(format!("unknown configuration key {k:?}")));
        }
        settings.set(k, v);
    }
    let checkpoint = settings.path("checkpoint").ok_or_else(|| config_error("a checkpoint path is required"))?;
    let log_path = settings.path("log").unwrap_or_else(|| {
        let mut p = checkpoint.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut state = if args.resume {
        let mut st = load_checkpoint(&checkpoint)?;
        if let Some(e) = settings.usize("epochs")? {
            st.config.epochs = e;
        }
        st
    } else {
        TrainState::<f32>::new(settings.train_config()?)?
    };
    let cfg = state.config.clone();
    echo_config(&format!(
        "{}data_dir={}\ncheckpoint={}\nlog={}",
        cfg.to_text(),
        settings.get("data_dir").unwrap_or(""),
        checkpoint.display(),
        log_path.display()
    ));
    info!("model has {} trainable parameters", state.param_count());
    if state.epoch as usize >= cfg.epochs {
        save_checkpoint(&state, &checkpoint)?;
        info!("wrote checkpoint {} (epoch {})", checkpoint.display(), state.epoch);
        return Ok(());
    }
    let data_dir = settings.path("data_dir").ok_or_else(|| config_error("data_dir is required for training"))?;
    let dataset = Dataset::<f32>::from_dir(&data_dir, cfg.channels)?;
    info!("loaded {} training images from {}", dataset.len(), data_dir.display());
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Failure::from(Error::Io { path: log_path.clone(), source: e }))?;
    while (state.epoch as usize) < cfg.epochs {
        let summary = train_epoch(&mut state, &dataset, Some(&mut log_file))?;
        log_file.flush().map_err(|e| Failure::from(Error::Io { path: log_path.clone(), source: e }))?;
        save_checkpoint(&state, &checkpoint)?;
        info!(
            "epoch {} done: {} steps, mean loss {:.4}, lr {:.3e}",
            state.epoch,
            summary.records.len(),
            summary.mean_loss(),
            cfg.lr_at(state.epoch as usize)
        );
    }
    Ok(())
}

fn cmd_sr(args: SrArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(c) = args.checkpoint {
        settings.set("checkpoint", c.display());
    }
    if args.ensemble {
        settings.set("ensemble", true);
    }
    let ensemble = settings.flag("ensemble")?;
    let checkpoint = settings.path("checkpoint").ok_or_else(|| config_error("a checkpoint path is required"))?;
    let state = load_checkpoint(&checkpoint)?;
    let cfg = state.config.clone();
    echo_config(&format!(
        "checkpoint={}\ninput={}\noutput={}\nensemble={ensemble}\nscale={}\nK={}\nfb_steps={}",
        checkpoint.display(),
        args.input.display(),
        args.output.display(),
        cfg.scale,
        cfg.steps,
        cfg.fb_steps
    ));
    let input = load_png::<f32>(&args.input)?;
    let lr = conform(&input, cfg.channels)?;
    let model = DegradationModel::new(cfg.scale)?;
    let solver = cfg.solver_config();
    let run = |y: &mmsr::Tensor<f32>| super_resolve(y, &model, &state.erd, &state.solver, &solver);
    let out = if ensemble { self_ensemble(run, &lr.pixels)? } else { run(&lr.pixels)? };
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("super-resolved {} contains non-finite values", args.input.display())).into());
    }
    let colorspace = if cfg.channels == 1 { ColorSpace::Luma } else { ColorSpace::Rgb };
    save_png(&Image::new(out, IntensityRange::Byte, colorspace)?, &args.output)?;
    info!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, mut settings: Settings) -> Result<(), Failure> {
    if let Some(s) = args.scale {
        settings.set("scale", s);
    }
    let scale = settings.usize("scale")?.unwrap_or(2);
    if scale < 1 {
        return Err(config_error("scale must be at least 1"));
    }
    let protocol = EvalProtocol { scale, border: args.border.unwrap_or(scale), y_channel: !args.rgb };
    echo_config(&format!(
        "sr_dir={}\ngt_dir={}\nscale={scale}\nborder={}\ny_channel={}",
        args.sr_dir.display(),
        args.gt_dir.display(),
        protocol.border,
        protocol.y_channel
    ));
    let gts = list_pngs(&args.gt_dir)?;
    if gts.is_empty() {
        return Err(data_error(format!("no PNG files in {}", args.gt_dir.display())));
    }
    let mut report = EvalReport::new(protocol);
    for gt_path in gts {
        let name = gt_path.file_name().expect("listed file").to_string_lossy().into_owned();
        let sr_path = args.sr_dir.join(&name);
        if !sr_path.is_file() {
            return Err(data_error(format!("missing SR image {}", sr_path.display())));
        }
        let gt = load_png::<f64>(&gt_path)?.mod_crop(scale)?;
        let sr = load_png::<f64>(&sr_path)?;
        let sr = if sr.colorspace != gt.colorspace { conform(&sr, gt.pixels.c())? } else { sr };
        let (p, s) = evaluate_pair(&sr, &gt, &protocol)?;
        report.push(name, p, s);
    }
    if report.mean_psnr().is_none() {
        warn!("every image is a perfect reconstruction; mean PSNR is the infinite sentinel");
    }
    print!("{}", report.to_table());
    if let Some(path) = &args.records {
        write_atomic(path, report.to_records().as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MMSR_LOG", "info")).init();
    let cli = Cli::parse();
    let result = Settings::load(cli.config.as_deref()).and_then(|settings| match cli.command {
        Command::Degrade(a) => cmd_degrade(a, settings),
        Command::Train(a) => cmd_train(a, settings),
        Command::Sr(a) => cmd_sr(a, settings),
        Command::Eval(a) => cmd_eval(a, settings),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
