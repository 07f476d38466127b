mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use echocss::data::Fraction;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "echocss",
    version,
    about = "Semi-supervised segmentation and EF regression on cyclical video"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Such as `1/8` or `0.125`.
    #[arg(long, global = true)]
    label_fraction: Option<Fraction>,
    /// Run directory (for `synth`, the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record the run as deterministic. The bundled backend always is.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Dataset root.
    #[arg(long, global = true, env = "ECHOCSS_DATA")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cyclical-video corpus.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        cycles: Option<f64>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the segmentation network with the cyclical loss.
    TrainSeg {
        #[arg(long)]
        w_css: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment every frame of the training and test videos.
    InferMasks {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the video plus mask regressor on labeled videos.
    TrainMulti {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Distill the mask regressor into a video-only regressor.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        w_ulb: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score checkpoints on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also export test-frame embeddings and a similarity matrix.
        #[arg(long)]
        embeddings: bool,
    },
    /// SmoothGrad heatmaps for one test video.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(&common.preset, path)?,
        None => RunConfig::preset(&common.preset)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(f) = common.label_fraction {
        cfg.label_fraction = f;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.dataset_root = Some(d.clone());
    }
    cfg.deterministic |= common.deterministic;
    cfg.sync_seeds();
    Ok(cfg)
}

fn run(command: Command, common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    match command {
        Command::Synth {
            count,
            test_count,
            cycles,
            force,
        } => {
            if let Some(c) = count {
                cfg.synthetic.count = c;
            }
            if let Some(t) = test_count {
                cfg.synthetic.params.test_count = t;
            }
            if let Some(c) = cycles {
                cfg.synthetic.params.cycles = c;
            }
            cfg.validate()?;
            commands::synth(&cfg, force)
        }
        Command::TrainSeg { w_css, epochs } => {
            if let Some(w) = w_css {
                cfg.segmentation.train.css.w_css = w;
            }
            if let Some(e) = epochs {
                cfg.segmentation.train.epochs = e;
            }
            cfg.validate()?;
            commands::train_seg(&cfg)
        }
        Command::InferMasks { checkpoint } => {
            cfg.validate()?;
            commands::infer_masks(&cfg, checkpoint)
        }
        Command::TrainMulti { epochs } => {
            if let Some(e) = epochs {
                cfg.regression.train.epochs = e;
            }
            cfg.validate()?;
            commands::train_multi(&cfg)
        }
        Command::Distill {
            teacher,
            w_ulb,
            epochs,
        } => {
            if let Some(w) = w_ulb {
                cfg.regression.train.w_ulb = w;
            }
            if let Some(e) = epochs {
                cfg.regression.train.epochs = e;
            }
            cfg.validate()?;
            commands::distill(&cfg, teacher)
        }
        Command::Evaluate {
            checkpoint,
            embeddings,
        } => {
            cfg.validate()?;
            commands::evaluate(&cfg, checkpoint, embeddings)
        }
        Command::Heatmap {
            checkpoint,
            sequence,
        } => {
            cfg.validate()?;
            commands::heatmap(&cfg, checkpoint, sequence)
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
