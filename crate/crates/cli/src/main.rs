mod commands;
mod config;
mod error;
mod overlay;

use std::path::PathBuf;

use clap::{Parser, Subcommand};


#[derive(Parser)]
#[command(
    name = "repsnet",
    about = "Nucleus instance segmentation: synthesize data, train, fuse, infer, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset with a 7:1:2 split
    Synth {
        /// key=value configuration file (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a synthesized dataset, keeping the best-validation checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `synth`
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// Train plain 3x3 conv+BN units instead of multi-branch units
        #[arg(long)]
        no_reparam: bool,
        /// Train plain 3x3 deconv+BN upsampling instead of dual-branch units
        #[arg(long)]
        no_repupsample: bool,
        /// Disable the boundary loss component
        #[arg(long)]
        no_nb_loss: bool,
        /// Overfit the first training sample for --steps updates
        #[arg(long)]
        overfit_one: bool,
        /// Step count for --overfit-one
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse a training-mode checkpoint into a single-branch inference checkpoint
    Fuse {
        /// Input checkpoint (training mode)
        #[arg(long)]
        input: PathBuf,
        /// Output checkpoint (fused); not written if verification fails
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment images with a checkpoint
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images (dataset layout or plain PNGs)
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the multi-branch weights as stored, or fuse before running.
        /// Boundary voting uses votes strictly greater than e_t.
        #[arg(long, value_parser = ["train", "fused"], default_value = "train")]
        mode: String,
        /// bvm: full boundary-voting pipeline; naive: components on the mask
        #[arg(long, value_parser = ["bvm", "naive"], default_value = "bvm")]
        post: String,
        /// Also write instance-boundary overlays in per-class colors
        #[arg(long)]
        overlay: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth
    Eval {
        /// Directory with {name}_pred.png and {name}_classes.csv
        #[arg(long)]
        pred: PathBuf,
        /// Directory with {name}_inst.png and {name}_types.png
        #[arg(long)]
        gt: PathBuf,
        /// Where to write per_image.csv and summary.txt (default: pred dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite and print a pass/fail table
    Checkgrad {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Compare train-mode and fused wall time, parameters and analytic FLOPs
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of timed forward passes
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> error::Result<config::RunConfig> {
    match path {
        Some(p) => config::RunConfig::load(p),
        None => Ok(config::RunConfig::default()),
    }
}

fn run(cli: Cli) -> error::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::synth::run(&cfg, &out)
        }
        Command::Train {
            config,
            data,
            out,
            no_reparam,
            no_repupsample,
            no_nb_loss,
            overfit_one,
            steps,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let options = commands::train::TrainOptions {
                multi_branch: !no_reparam,
                rep_upsample: !no_repupsample,
                nb_loss: !no_nb_loss,
                overfit_one,
                overfit_steps: steps,
            };
            commands::train::run(&cfg, &data, &out, &options)
        }
        Command::Fuse { input, output } => commands::fuse::run(&input, &output),
        Command::Infer {
            checkpoint,
            images,
            out,
            mode,
            post,
            overlay,
            config,
        } => {
            let cfg = load_config(&config)?;
            commands::infer::run(
                &cfg,
                &checkpoint,
                &images,
                &out,
                mode == "fused",
                post == "naive",
                overlay,
            )
        }
        Command::Eval { pred, gt, out } => commands::eval::run(&pred, &gt, out.as_deref()),
        Command::Checkgrad { seed } => commands::checkgrad::run(seed),
        Command::Bench {
            checkpoint,
            runs,
            height,
            width,
            seed,
        } => commands::bench::run(&checkpoint, runs, height, width, seed).map(|_| ()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version output is not an error
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
