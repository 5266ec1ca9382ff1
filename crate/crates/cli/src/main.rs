use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radious_cli::commands::{self, SplitChoice};
use radious_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "radious", version, about = "Dental radiograph segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config dataset root.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, u64), CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
            cfg.palette = None;
        }
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Masked-image-modeling pretraining of the transformer.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning of backbone and decoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a metric report for one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model to evaluate; omit together with --identity to score ground truth against itself.
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long, default_value = "test")]
        split: SplitChoice,
        /// Model name stored in the report; defaults to the checkpoint file stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segments one image into a mask PNG plus `<out>_overlay.png`.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-rebalancing augmentation.
    Augment {
        #[command(subcommand)]
        action: AugmentAction,
    },
    /// Ranks metric reports by mIoU.
    Compare {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Also write the ranking as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the procedural shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum AugmentAction {
    /// Prints per-class f, f' and targets; `--out` also writes them as JSON.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the planned samples as a new dataset directory.
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, init, out } => {
            let (cfg, seed) = common.load()?;
            let logs = commands::pretrain(&cfg, seed, init.as_deref(), &out)?;
            for (i, l) in logs.iter().enumerate() {
                println!("epoch {i} mim_loss {:.6}", l.loss);
            }
        }
        Command::Train { common, init, out } => {
            let (cfg, seed) = common.load()?;
            let logs = commands::train(&cfg, seed, init.as_deref(), &out)?;
            for (i, l) in logs.iter().enumerate() {
                println!("epoch {i} loss {:.6}", l.loss);
            }
        }
        Command::Eval { common, checkpoint, identity: _, split, name, out } => {
            let (cfg, seed) = common.load()?;
            let r = commands::eval(&cfg, seed, checkpoint.as_deref(), split, name.as_deref(), &out)?;
            println!("{} mIoU {:.4} mAcc {:.4} over {} pixels", r.model_name, r.miou, r.macc, r.pixel_total);
        }
        Command::Infer { common, checkpoint, image, out } => {
            let (cfg, _) = common.load()?;
            commands::infer(&cfg, &checkpoint, &image, &out)?;
            println!("{}\n{}", out.display(), commands::overlay_path(&out).display());
        }
        Command::Augment { action: AugmentAction::Plan { common, out } } => {
            let (cfg, seed) = common.load()?;
            let (plan, _, palette) = commands::augment_plan(&cfg, seed)?;
            print!("{}", plan.render(Some(&palette)));
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
                std::fs::write(&out, text).map_err(|e| CliError::io(&out, e))?;
            }
        }
        Command::Augment { action: AugmentAction::Apply { common, out } } => {
            let (cfg, seed) = common.load()?;
            let (_, written) = commands::augment_apply(&cfg, seed, &out)?;
            println!("wrote {written} samples to {}", out.display());
        }
        Command::Compare { reports, out } => {
            let (_, table) = commands::compare(&reports, out.as_deref())?;
            print!("{table}");
        }
        Command::Synth { out, count, width, height, seed } => {
            commands::synth(&out, count, width, height, seed)?;
            println!("wrote {count} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
