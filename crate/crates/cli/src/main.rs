use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sdacd", version, about = "Cross-domain change detection with image and feature adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that resolves a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data synthesis and training; beats SDACD_SEED and the file.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training knobs exposed as flags.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable image adaptation (only the original pair is used).
    #[arg(long)]
    pub no_ia: bool,
    /// Disable feature adaptation.
    #[arg(long)]
    pub no_fa: bool,
    /// Active pairs, e.g. `original,pre_domain,post_domain`.
    #[arg(long)]
    pub tags: Option<String>,
    /// `feature` or `output`.
    #[arg(long)]
    pub fusion: Option<String>,
    /// `least_squares` or `vanilla`.
    #[arg(long)]
    pub gan_form: Option<String>,
    /// Replay pools of past translations for the image discriminators.
    #[arg(long)]
    pub replay: bool,
    #[arg(long)]
    pub no_augment: bool,
}

/// Where the data comes from.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset root with `train/`, `val/`, `test/` splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate train and test sets from the `synth.*` config instead.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: bool,
    /// Expected square tile size of the dataset.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Resize tiles of another size instead of failing.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cross-domain benchmark split with a manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        change_rate: Option<f64>,
        /// `train`, `val` or `test`.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut large `A/B/OUT` scenes into tiles.
    Tile {
        /// Directory holding `A`, `B`, `OUT` scene folders.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Window step; defaults to the tile size.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train a model and write checkpoints and logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-image and summary reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// `train`, `val` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// `micro` or `macro`.
        #[arg(long)]
        aggregation: Option<String>,
        /// Inference-time fusion override.
        #[arg(long)]
        fusion: Option<String>,
        /// Inference-time pair subset override.
        #[arg(long)]
        tags: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every nonempty combination of the three pairs.
    AblatePairs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare output and feature fusion.
    AblateFusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline, baseline + IA, baseline + IA + FA.
    AblateModules {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump cross-domain translations of a dataset split.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the cycle reconstructions.
        #[arg(long)]
        cycle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss curves from a training log and per-sample comparison panels.
    Plot {
        /// Training log to plot.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Checkpoint for the prediction panels.
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated sample ids; all samples when omitted.
        #[arg(long)]
        ids: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hand-wired pixel-difference model, exact on unshifted synthetic data.
    Oracle {
        #[arg(long, default_value_t = 100.0)]
        gain: f32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Synth {
            cfg,
            n,
            tile,
            shift,
            change_rate,
            split,
            out,
        } => synth(&cfg, n, tile, shift, change_rate, &split, &out),
        Command::Tile {
            input,
            out,
            split,
            tile,
            stride,
        } => tile_scenes(&input, &out, &split, tile, stride.unwrap_or(tile)),
        Command::Train {
            cfg,
            train: t,
            data,
            resume,
            out,
        } => train(&cfg, &t, &data, resume.as_deref(), out.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            split,
            threshold,
            aggregation,
            fusion,
            tags,
            out,
        } => eval(
            &cfg,
            &checkpoint,
            &data,
            &split,
            threshold,
            aggregation.as_deref(),
            fusion.as_deref(),
            tags.as_deref(),
            out.as_deref(),
        ),
        Command::AblatePairs { cfg, train: t, data, out } => ablate(Ablation::Pairs, &cfg, &t, &data, out.as_deref()),
        Command::AblateFusion { cfg, train: t, data, out } => ablate(Ablation::Fusion, &cfg, &t, &data, out.as_deref()),
        Command::AblateModules { cfg, train: t, data, out } => ablate(Ablation::Modules, &cfg, &t, &data, out.as_deref()),
        Command::Transform {
            checkpoint,
            data,
            split,
            cycle,
            out,
        } => transform(&checkpoint, &data, &split, cycle, &out),
        Command::Plot {
            log,
            checkpoint,
            data,
            split,
            ids,
            out,
        } => plot(log.as_deref(), checkpoint.as_deref(), &data, &split, ids.as_deref(), &out),
        Command::Oracle { gain, out } => oracle(gain, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .find_map(|c| c.downcast_ref::<sdacd::Error>())
                .is_some_and(sdacd::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
