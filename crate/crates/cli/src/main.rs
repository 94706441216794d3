use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hvcomp::autodiff::inject_softplus_fault;
use hvcomp::config::TrainConfig;
use hvcomp::data::{load_split, make_dataset, read_manifest, DatasetManifest, ViewMode, MANIFEST_FILE};
use hvcomp::diagnostics::check_components;
use hvcomp::metrics::{report_csv, uhd};
use hvcomp::model::ModelConfig;
use hvcomp::pipeline::Model;
use hvcomp::pointcloud::PointCloud;
use hvcomp::train::{load_checkpoint, run_training, TrainState};
use hvcomp::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other error
  2  invalid manifest, config or arguments
  3  I/O or file format error
  4  non-finite loss during training
  5  extracted surface is empty
  6  checkpoint has no posterior weights
  7  gradient check failed

Environment:
  HVCP_THREADS  cap on worker threads (default: all cores)
  RUST_LOG      log level (default: info)";

#[derive(Parser)]
#[command(name = "hvcomp", version, about = "Probabilistic point-cloud shape completion", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a manifest.
    MakeData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.hvcp, train_log.csv and config.txt to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from --out/checkpoint.hvcp if it exists.
        #[arg(long)]
        resume: bool,
        /// Override a config key, e.g. --set iterations=100.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sample completions of a partial cloud from the prior.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Partial cloud (.xyz or .ply).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Auto-encode a complete cloud through the posterior mean.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output OBJ path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split and write a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or one of its split directories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Partial view used as input (default: the dataset's own view).
        #[arg(long, value_parser = parse_view)]
        mode: Option<ViewMode>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Micro)]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Micro,
}

fn parse_view(s: &str) -> Result<ViewMode, String> {
    ViewMode::parse(s).map_err(|e| e.to_string())
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Manifest(_) | Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io(_) | Error::EmptyCloud | Error::OutsideUnitCube { .. } | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated | Error::Parse(_) => 3,
            Error::NonFiniteLoss(_) => 4,
            Error::EmptyMesh => 5,
            Error::MissingPosterior => 6,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_context(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

type CmdResult = Result<(), Failure>;

fn make_data(manifest: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(manifest).map_err(io_context(manifest))?;
    let manifest = DatasetManifest::parse(&text)?;
    let n = make_dataset(&manifest, out)?;
    for (split, count) in manifest.splits() {
        println!("{split} {count}");
    }
    println!("total {n}");
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: bool, overrides: &[String]) -> CmdResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_context(out))?;
    let ckpt = out.join("checkpoint.hvcp");
    cfg.checkpoint = ckpt.to_string_lossy().into_owned();
    cfg.log = out.join("train_log.csv").to_string_lossy().into_owned();
    cfg.dataset = data.to_string_lossy().into_owned();
    cfg.checkpoint_iter = 0;
    let state = if resume && ckpt.exists() {
        let (store, saved) = load_checkpoint(&ckpt)?;
        if saved.model != cfg.model {
            return Err(Error::Config("resumed checkpoint has a different model config".into()).into());
        }
        log::info!("resuming at iteration {}", saved.checkpoint_iter);
        TrainState { store, iter: saved.checkpoint_iter }
    } else {
        TrainState::fresh(&cfg)?
    };
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_context(out))?;
    let items = load_split(data, "train")?;
    let (state, rows) = run_training(&cfg, &items, state)?;
    if let Some(last) = rows.last() {
        println!("iterations {} loss {}", state.iter, last.loss);
    } else {
        println!("iterations {} (nothing to do)", state.iter);
    }
    Ok(())
}

fn complete(checkpoint: &Path, input: &Path, samples: Option<usize>, seed: u64, out_dir: &Path) -> CmdResult {
    let mut model = Model::load(checkpoint)?;
    if let Some(k) = samples {
        model.cfg.samples = k;
    }
    let partial = PointCloud::read(input)?;
    fs::create_dir_all(out_dir).map_err(io_context(out_dir))?;
    let mut csv = String::from("sample,seed,uhd\n");
    for (i, grid) in model.completions(&partial, model.cfg.samples, seed)?.iter().enumerate() {
        let mesh = model.extract(grid)?;
        mesh.write_obj(&out_dir.join(format!("sample_{i:02}.obj")))?;
        let s = seed + i as u64;
        let cloud = model.surface(grid, seed, i as u64)?.ok_or(Error::EmptyMesh)?;
        let d = uhd(&partial, std::slice::from_ref(&cloud), model.cfg.uhd_mode)?;
        let _ = writeln!(csv, "{i},{s},{d}");
    }
    fs::write(out_dir.join("uhd.csv"), csv).map_err(io_context(out_dir))?;
    println!("wrote {} samples to {}", model.cfg.samples, out_dir.display());
    Ok(())
}

fn reconstruct(checkpoint: &Path, input: &Path, out: &Path) -> CmdResult {
    let model = Model::load(checkpoint)?;
    let complete = PointCloud::read(input)?;
    let grid = model.reconstruct(&complete)?;
    model.extract(&grid)?.write_obj(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    mode: Option<ViewMode>,
    samples: Option<usize>,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let mut model = Model::load(checkpoint)?;
    if let Some(k) = samples {
        model.cfg.samples = k;
    }
    let items = if data.join(MANIFEST_FILE).exists() {
        load_split(data, split)?
    } else {
        let parent = data.parent().unwrap_or(Path::new("."));
        let name = data.file_name().and_then(|n| n.to_str()).unwrap_or(split);
        load_split(parent, name)?
    };
    if mode.is_some() {
        // Items carry the view they were cut with; re-cut only when asked for another.
        let root = if data.join(MANIFEST_FILE).exists() { data } else { data.parent().unwrap_or(Path::new(".")) };
        model.cfg.view = read_manifest(root)?.view;
    }
    let rows = model.evaluate(&items, mode, seed)?;
    fs::write(out, report_csv(&rows)).map_err(io_context(out))?;
    println!("evaluated {} items, report at {}", rows.len(), out.display());
    Ok(())
}

fn gradcheck(scale: Scale, seed: u64, fault: bool) -> CmdResult {
    let cfg = match scale {
        Scale::Micro => ModelConfig::micro(),
    };
    inject_softplus_fault(fault);
    let rows = check_components(&cfg, seed)?;
    println!("{:<10} {:>8} {:>14}", "component", "params", "max_rel_err");
    let mut failed = Vec::new();
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<10} {:>8} {:>14.3e} {status}", r.component, r.params, r.max_rel_error);
        if !r.passed() {
            failed.push(r.component);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 7, message: format!("gradient check failed for: {}", failed.join(", ")) })
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("HVCP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::MakeData { manifest, out } => make_data(manifest, out),
        Cmd::Train { config, data, out, resume, overrides } => train(config.as_deref(), data, out, *resume, overrides),
        Cmd::Complete { checkpoint, input, samples, seed, out_dir } => complete(checkpoint, input, *samples, *seed, out_dir),
        Cmd::Reconstruct { checkpoint, input, out } => reconstruct(checkpoint, input, out),
        Cmd::Eval { checkpoint, data, split, mode, samples, seed, out } => {
            eval(checkpoint, data, split, *mode, *samples, *seed, out)
        }
        Cmd::Gradcheck { scale, seed, inject_fault } => gradcheck(*scale, *seed, *inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
