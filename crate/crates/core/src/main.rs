use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use splice_core::cli::{
    cmd_distill, cmd_eval_recon, cmd_interpolate, cmd_invert, cmd_modes, cmd_splice, cmd_splicenet_run,
    cmd_splicenet_train, DistillArgs, EvalReconArgs, InterpolateArgs, InvertArgs, ModesArgs, Overrides,
    SpliceArgs, SpliceNetRunArgs, SpliceNetTrainArgs,
};
use splice_core::distillation::Metric;

/// Appearance transfer with ViT features.
///
/// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
/// Set SPLICE_DEVICE to choose the compute device (only `cpu` in this build).
#[derive(Parser)]
#[command(name = "splice", version)]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOverrides {
    /// TOML config file; flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// ViT architecture: vit-b8 or tiny.
    #[arg(long)]
    vit_arch: Option<String>,
    /// ViT weights file, or random:<seed>.
    #[arg(long, env = "SPLICE_VIT_WEIGHTS")]
    vit_weights: Option<String>,
    /// Height images are resized to before the ViT.
    #[arg(long)]
    vit_resize: Option<usize>,
}

impl CommonOverrides {
    fn overrides(&self) -> Overrides {
        Overrides {
            iterations: self.iterations,
            seed: self.seed,
            vit_arch: self.vit_arch.clone(),
            vit_weights: self.vit_weights.clone(),
            vit_resize: self.vit_resize,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on one structure/appearance pair.
    Splice {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Train the feed-forward model on a pair file.
    SplicenetTrain {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Apply a trained model to a structure image.
    SplicenetRun {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long, conflicts_with = "token_file", required_unless_present = "token_file")]
        appearance: Option<PathBuf>,
        /// JSON token file, e.g. a mode centroid.
        #[arg(long)]
        token_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SPLICE_VIT_WEIGHTS")]
        vit_weights: Option<String>,
    },
    /// Pair a directory of images by mutual nearest neighbors.
    Distill {
        #[arg(long)]
        data_dir: PathBuf,
        /// Neighbors per image (default 10).
        #[arg(long)]
        k: Option<usize>,
        /// Pooling window of the coarse descriptor (default 4).
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        /// Pair file to write; descriptors go next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Invert a ViT feature of an image through a deep image prior.
    Invert {
        #[arg(long)]
        target: PathBuf,
        /// cls@L, keys@L or selfsim@L (default: CLS of the deepest layer).
        #[arg(long, conflicts_with = "layers")]
        selector: Option<String>,
        /// Invert the CLS token of each listed layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Optimize pixels directly instead of a prior network.
        #[arg(long)]
        pixels_only: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Cluster CLS tokens of a directory into appearance modes.
    Modes {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        kmeans_seed: u64,
        /// Model whose ViT embeds the images and which renders the mode grid.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Structure images for the mode grid.
        #[arg(long, value_delimiter = ',')]
        structures: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Render a structure under tokens interpolated toward an appearance.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "SPLICE_VIT_WEIGHTS")]
        vit_weights: Option<String>,
    },
    /// Self-reconstruction error of a model over a directory.
    EvalRecon {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_dir: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        /// lpips or mse.
        #[arg(long, default_value = "lpips")]
        perceptual: String,
        #[arg(long)]
        lpips_weights: Option<PathBuf>,
        #[arg(long, env = "SPLICE_VIT_WEIGHTS")]
        vit_weights: Option<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let manifest = match cli.command {
        Command::Splice {
            structure,
            appearance,
            out_dir,
            common,
        } => cmd_splice(&SpliceArgs {
            structure,
            appearance,
            config: common.config.clone(),
            out_dir,
            overrides: common.overrides(),
        })?,
        Command::SplicenetTrain {
            pairs,
            data_dir,
            out_dir,
            resume,
            common,
        } => cmd_splicenet_train(&SpliceNetTrainArgs {
            pairs,
            data_dir,
            config: common.config.clone(),
            out_dir,
            resume,
            overrides: common.overrides(),
        })?,
        Command::SplicenetRun {
            checkpoint,
            structure,
            appearance,
            token_file,
            out,
            vit_weights,
        } => cmd_splicenet_run(&SpliceNetRunArgs {
            checkpoint,
            structure,
            appearance,
            token_file,
            out,
            vit_weights,
        })?,
        Command::Distill {
            data_dir,
            k,
            window,
            metric,
            out,
            common,
        } => cmd_distill(&DistillArgs {
            data_dir,
            k,
            window,
            metric,
            out,
            config: common.config.clone(),
            overrides: common.overrides(),
        })?,
        Command::Invert {
            target,
            selector,
            layers,
            steps,
            pixels_only,
            out_dir,
            common,
        } => cmd_invert(&InvertArgs {
            target,
            selector,
            layers,
            steps,
            pixels_only,
            config: common.config.clone(),
            out_dir,
            overrides: common.overrides(),
        })?,
        Command::Modes {
            data_dir,
            k,
            kmeans_seed,
            checkpoint,
            structures,
            out_dir,
            common,
        } => cmd_modes(&ModesArgs {
            data_dir,
            k,
            seed: kmeans_seed,
            checkpoint,
            structures,
            out_dir,
            config: common.config.clone(),
            overrides: common.overrides(),
        })?,
        Command::Interpolate {
            checkpoint,
            structure,
            appearance,
            alphas,
            out_dir,
            vit_weights,
        } => cmd_interpolate(&InterpolateArgs {
            checkpoint,
            structure,
            appearance,
            alphas,
            out_dir,
            vit_weights,
        })?,
        Command::EvalRecon {
            checkpoint,
            image_dir,
            out_csv,
            perceptual,
            lpips_weights,
            vit_weights,
        } => {
            let (report, manifest) = cmd_eval_recon(&EvalReconArgs {
                checkpoint,
                image_dir,
                out_csv,
                perceptual,
                lpips_weights,
                vit_weights,
            })?;
            println!("mean_mse: {:.6}", report.mean_mse);
            println!("mean_{}: {:.6}", report.perceptual_kind, report.mean_perceptual);
            manifest
        }
    };
    for (name, seed) in &manifest.seeds {
        println!("seed.{name}: {seed}");
    }
    let written = manifest.outputs.last().context("command wrote no manifest")?;
    println!("manifest: {}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e
                .downcast_ref::<splice_core::Error>()
                .map_or(2, splice_core::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
