use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use duet_core::eval::EvalMode;
use duet_core::runtime::{
    ablate_run, default_config, eval_run, export_run, load_config, train_run, Overrides, Preset, RunConfig,
    TrainOptions,
};

#[derive(Parser)]
#[command(name = "duet", version, about = "Train and evaluate capable/lightweight policy pairs")]
struct Cli {
    /// Run configuration (TOML). Without it the preset's built-in chain task is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `runs/<variant>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Duet,
    SmallAlone,
    LargeAlone,
    Truncation,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics, checkpoints and a final report.
    Train {
        /// Stop after this step.
        #[arg(long)]
        until: Option<usize>,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint (or the initial policies).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Reasoning budget for truncation mode.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// The ±MU × ±LPS grid plus the frozen-lightweight run.
    Ablate,
    /// Plotting CSVs from an existing run directory.
    Export,
}

fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let overrides = Overrides {
        preset: cli.preset.map(|p| match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }),
        seed: cli.seed,
        out_dir: cli.out.clone(),
    };
    let cfg = match &cli.config {
        Some(path) => load_config(path, &overrides).with_context(|| format!("loading {}", path.display()))?,
        None => default_config(&overrides)?,
    };
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.variant.name()));
    Ok((cfg, out))
}

fn eval_mode(cfg: &RunConfig, mode: Option<ModeArg>, budget: Option<usize>) -> Result<Option<EvalMode>> {
    let default_budget = || match cfg.eval_mode() {
        EvalMode::Truncation(b) => b,
        _ => cfg.train.budget.round() as usize,
    };
    Ok(match (mode, budget) {
        (None, None) => None,
        (None, Some(b)) | (Some(ModeArg::Truncation), Some(b)) => Some(EvalMode::Truncation(b)),
        (Some(ModeArg::Truncation), None) => Some(EvalMode::Truncation(default_budget())),
        (Some(_), Some(_)) => bail!("--budget only applies to truncation mode"),
        (Some(ModeArg::Duet), None) => Some(EvalMode::Duet),
        (Some(ModeArg::SmallAlone), None) => Some(EvalMode::SmallAlone),
        (Some(ModeArg::LargeAlone), None) => Some(EvalMode::LargeAlone),
    })
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out) = resolve(&cli)?;
    match cli.command {
        Command::Train { until, resume } => {
            let s = train_run(&cfg, &out, &TrainOptions { until, resume })?;
            println!("trained to step {} (lambda {:.4})", s.step, s.lambda);
            if let Some(rec) = s.last_eval {
                println!("{}", serde_json::to_string(&rec)?);
            }
            if let Some(c) = s.checkpoint {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Eval { checkpoint, mode, budget } => {
            let mode = eval_mode(&cfg, mode, budget)?;
            let rec = eval_run(&cfg, &out, checkpoint.as_deref(), mode)?;
            println!("{}", serde_json::to_string(&rec)?);
        }
        Command::Ablate => {
            let (_, table) = ablate_run(&cfg, &out)?;
            print!("{}", table.to_text());
        }
        Command::Export => {
            for path in export_run(&out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
