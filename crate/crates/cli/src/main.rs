use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pixclust::commands::{self, EvalMode};
use pixclust::config::RunConfig;
use pixclust::CliError;

#[derive(Parser)]
#[command(name = "pixclust", version, about = "Proposal-free instance segmentation by learned pixel clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run inference and score the predictions.
    InferEval {
        #[arg(long)]
        config: PathBuf,
        /// Required unless --gt-passthrough is given.
        #[arg(long, required_unless_present = "gt_passthrough")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth as if it were the network output.
        #[arg(long, conflicts_with = "ckpt")]
        gt_passthrough: bool,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, out, seed, count } => {
            let mut cfg = load(&config, seed)?;
            if let Some(c) = count {
                cfg.count = c;
            }
            let m = commands::cmd_gen(&cfg, &out)?;
            eprintln!("wrote {} scenes to {}", m.count, out.display());
        }
        Command::Train { config, data, out, seed, steps } => {
            let mut cfg = load(&config, seed)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let outcome = commands::cmd_train(&cfg, &data, &out)?;
            match commands::final_breakdown(&outcome) {
                Some(b) => commands::print_json(&b)?,
                None => eprintln!("no training steps run; checkpoint holds the initial weights"),
            }
        }
        Command::InferEval { config, ckpt, data, mode, out, gt_passthrough: _ } => {
            let cfg = load(&config, None)?;
            let report = commands::cmd_infer_eval(&cfg, ckpt.as_deref(), &data, mode, &out)?;
            commands::print_json(&report)?;
        }
        Command::GradCheck { config, seed, max_coords, tolerance } => {
            let mut cfg = load(&config, seed)?;
            if max_coords.is_some() {
                cfg.grad_check.max_coords = max_coords;
            }
            let r = commands::cmd_grad_check(&cfg, tolerance)?;
            commands::print_json(&serde_json::json!({
                "max_rel_error": r.max_rel_error,
                "checked": r.checked,
                "skipped_nonsmooth": r.skipped_nonsmooth,
                "worst": r.worst,
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
