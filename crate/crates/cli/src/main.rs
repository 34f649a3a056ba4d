use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgedepth::config::RunConfig;
use edgedepth::data::{generate_dataset, load_raster, save_raster, CropMode, Dataset, Raster};
use edgedepth::eval::{evaluate, predict};
use edgedepth::grad_suite::{self, CheckRow};
use edgedepth::train::{load_checkpoint, train};
use edgedepth::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "edgedepth", version, about = "Monocular depth estimation with patch-wise EdgeConv and EdgeConv attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// key=value config file; its `preset=` line picks the base preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// nyu, kitti or desk. Used when the config file names none.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation range in meters: `MAX` or `MIN,MAX`.
    #[arg(long)]
    cap: Option<String>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes checkpoints and the loss curve to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (out.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image metrics and their mean as CSV.
    Eval {
        /// Weight file; its `.cfg` sidecar supplies the model config.
        checkpoint: PathBuf,
        /// Dataset root; defaults to data.root of the checkpoint config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split; defaults to data.eval_split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        cap: Option<String>,
        /// kitti, eigen or none; defaults to data.crop.
        #[arg(long)]
        crop: Option<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth raster for one image raster.
    Predict {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exits 1 if any row fails.
    Gradcheck {
        /// `all` or one module name.
        #[arg(default_value = "all")]
        scope: String,
    },
    /// Render random synthetic scenes into `<out>/<split>`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 10.0)]
        max_depth: f64,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::Numeric { .. } => EXIT_CHECK_FAILED,
            _ => EXIT_CONFIG,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, msg: msg.into() }
}

fn parse_cap(s: &str) -> Result<(f64, f64), Failure> {
    let parts: Vec<&str> = s.split(',').collect();
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| config_error(format!("--cap: cannot parse {s:?}")));
    match parts[..] {
        [max] => Ok((0.0, num(max)?)),
        [min, max] => Ok((num(min)?, num(max)?)),
        _ => Err(config_error(format!("--cap: expected MAX or MIN,MAX, got {s:?}"))),
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Failure> {
    let preset = args.preset.as_deref().unwrap_or("desk");
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path, preset)?,
        None => RunConfig::preset(preset)?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(cap) = &args.cap {
        cfg.cap = parse_cap(cap)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_error(format!("--set: expected key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fully resolved config, one `# key=value` line each.
fn header(cfg: &RunConfig) {
    for line in cfg.to_kv().lines() {
        println!("# {line}");
    }
}

fn cmd_train(run: &RunArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = resolve(run)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    header(&cfg);
    let data = Dataset::load(&cfg.data_root, &cfg.train_split)?;
    log::info!("{} training samples from {}", data.len(), cfg.data_root.join(&cfg.train_split).display());
    let outcome = train(&cfg, &data, |r| log::debug!("step {} epoch {} lr {:e} loss {:.6}", r.step, r.epoch, r.lr, r.loss))?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch={epoch} loss={loss:.6}");
    }
    for path in outcome.save(&cfg, &cfg.out_dir)? {
        log::info!("wrote {}", path.display());
    }
    println!("best_epoch={} steps={}", outcome.best_epoch, outcome.curve.len());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: Option<PathBuf>,
    split: Option<String>,
    cap: Option<String>,
    crop: Option<String>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (mut cfg, net, params) = load_checkpoint(checkpoint)?;
    if let Some(d) = data {
        cfg.data_root = d;
    }
    if let Some(s) = split {
        cfg.eval_split = s;
    }
    if let Some(c) = cap {
        cfg.cap = parse_cap(&c)?;
    }
    if let Some(c) = crop {
        cfg.crop = c.parse::<CropMode>()?;
    }
    cfg.validate()?;
    header(&cfg);
    let dataset = Dataset::load(&cfg.data_root, &cfg.eval_split)?;
    let outcome = evaluate(&net, &params, &dataset, cfg.crop, cfg.cap)?;
    let csv = outcome.to_csv();
    match out {
        Some(path) => {
            std::fs::write(&path, &csv).map_err(Error::from)?;
            log::info!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    println!("{}", outcome.mean);
    Ok(())
}

fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let (cfg, net, params) = load_checkpoint(checkpoint)?;
    header(&cfg);
    let image = load_raster(input)?;
    if image.channels != 3 {
        return Err(config_error(format!("{}: expected 3 channels, got {}", input.display(), image.channels)));
    }
    let depth = predict(&net, &params, &image.to_tensor()?)?;
    save_raster(out, &Raster::from_tensor(&depth)?)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(scope: &str) -> Result<(), Failure> {
    println!("# scope={scope}");
    println!("# steps={:?}", grad_suite::STEPS);
    println!("# tolerance={:e}", grad_suite::TOLERANCE);
    let cases = grad_suite::cases(scope)?;
    println!("{}", CheckRow::header());
    let start = std::time::Instant::now();
    let mut failed = 0;
    for case in &cases {
        let row = case.run();
        failed += usize::from(!row.pass);
        println!("{}", row.line());
    }
    println!("{} checks, {failed} failed, {:.2}s", cases.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure { code: EXIT_CHECK_FAILED, msg: format!("{failed} gradient checks failed") });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, out } => cmd_train(&run, out),
        Command::Eval { checkpoint, data, split, cap, crop, out } => cmd_eval(&checkpoint, data, split, cap, crop, out),
        Command::Predict { checkpoint, input, out } => cmd_predict(&checkpoint, &input, &out),
        Command::Gradcheck { scope } => cmd_gradcheck(&scope),
        Command::Generate { out, split, count, seed, width, height, max_depth } => {
            generate_dataset(&out, &split, count, seed, width, height, max_depth)
                .map(|ids| println!("generated {} scenes in {}", ids.len(), out.join(&split).display()))
                .map_err(Failure::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
