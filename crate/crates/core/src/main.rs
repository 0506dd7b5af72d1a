use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streetfield::cli::{
    cmd_ablate, cmd_confidence, cmd_eval, cmd_fuse, cmd_gen, cmd_train, CliError, ViewSelection,
};
use streetfield::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "streetfield",
    about = "Street-scene radiance fields with LiDAR depth fusion and confidence-guided supervision",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --set train.iterations=200.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed driving every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Scene mode: background or foreground.
    #[arg(long)]
    mode: Option<String>,
    /// Disable depth and smoothness supervision.
    #[arg(long)]
    rgb_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a scene description.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Scene file path or `builtin:street-toy`.
        #[arg(long, default_value = "builtin:street-toy")]
        scene: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse LiDAR sweeps into sparse and dense depth maps.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute per-view confidence maps for the fused depth.
    Confidence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the radiance field.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long)]
        conf: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render views from a checkpoint (no metrics).
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// holdout | train | all | f:c[,f:c...] | novel:<fa>:<fb>:<cam>:<alpha>
        #[arg(long, default_value = "holdout")]
        views: String,
    },
    /// Render and score views against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "holdout")]
        views: String,
    },
    /// Run the depth-supervision (or tau) ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.load_file(path)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    for pair in &common.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.apply(k.trim(), v.trim())
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if let Some(mode) = &common.mode {
        cfg.apply("mode", mode)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    if common.rgb_only {
        cfg.train_rgb_only = true;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.threads > 0 {
        // ignore failure if a pool already exists (e.g. repeated calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common, scene, out } => {
            let cfg = build_config(common)?;
            cmd_gen(scene, out, &cfg)
        }
        Command::Fuse {
            common,
            dataset,
            out,
        } => {
            let cfg = build_config(common)?;
            cmd_fuse(dataset, out.as_deref(), &cfg).map(|_| ())
        }
        Command::Confidence {
            common,
            dataset,
            fused,
            out,
        } => {
            let cfg = build_config(common)?;
            cmd_confidence(dataset, fused.as_deref(), out.as_deref(), &cfg)
        }
        Command::Train {
            common,
            dataset,
            fused,
            conf,
            out,
        } => {
            let cfg = build_config(common)?;
            cmd_train(dataset, fused.as_deref(), conf.as_deref(), out.as_deref(), &cfg)
                .map(|_| ())
        }
        Command::Render {
            common,
            dataset,
            checkpoint,
            out,
            views,
        } => {
            let cfg = build_config(common)?;
            let selection = ViewSelection::parse(views)?;
            cmd_eval(dataset, checkpoint, out, &selection, &cfg, false).map(|_| ())
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            out,
            views,
        } => {
            let cfg = build_config(common)?;
            let selection = ViewSelection::parse(views)?;
            cmd_eval(dataset, checkpoint, out, &selection, &cfg, true).map(|_| ())
        }
        Command::Ablate {
            common,
            dataset,
            out,
        } => {
            let cfg = build_config(common)?;
            cmd_ablate(dataset, out, &cfg).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
