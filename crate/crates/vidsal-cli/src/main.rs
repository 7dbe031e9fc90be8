//! Command-line entry point for the video saliency stack: synthetic
//! data rendering, supervised and distillation training, width
//! reduction, metric evaluation, cost profiling, and cross-model
//! agreement.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical divergence. Failures print exactly one line on standard
//! error of the form `error kind=<k> code=<n>: <reason>`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use vidsal::Error;

use config::{Experiment, Overrides};

#[derive(Parser)]
#[command(name = "vidsal", version, about = "Video saliency training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Common {
    /// Experiment config file (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random choice in the run
    #[arg(long)]
    seed: Option<u64>,
    /// Directory artifacts are written to
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ModelFlags {
    /// Temporal output contract: miso or mimo
    #[arg(long)]
    mode: Option<String>,
    /// Channel width multiplier: 1, 0.5, 0.25 (or full, half, quarter)
    #[arg(long)]
    width: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset of moving-blob clips
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training against ground-truth maps only
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Training epochs (overrides the schedule section)
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory (or the data key in the config)
        data: Option<PathBuf>,
    },
    /// Distillation training against a teacher's map hierarchy
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Teacher source: file:<dataset-dir> or frozen:<checkpoint-dir>
        #[arg(long)]
        teacher: Option<String>,
        /// Unlabeled auxiliary dataset directory
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Training epochs (overrides the schedule section)
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory (or the data key in the config)
        data: Option<PathBuf>,
    },
    /// Distill through a width-reduction plan, stage by stage
    Reduce {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Teacher source: file:<dataset-dir> or frozen:<checkpoint-dir>
        #[arg(long)]
        teacher: Option<String>,
        /// Unlabeled auxiliary dataset directory
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Training epochs per stage (overrides the schedule section)
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory (or the data key in the config)
        data: Option<PathBuf>,
    },
    /// Score a checkpoint's predictions on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to evaluate
        ckpt: PathBuf,
        /// Dataset directory (or the data key in the config)
        data: Option<PathBuf>,
    },
    /// Account multiply-accumulates and parameters for a configuration
    Profile {
        /// Experiment config file (TOML); flags override its values
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory the CSV report is written to (table prints anyway)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Pairwise prediction agreement between checkpoints
    Agree {
        #[command(flatten)]
        common: Common,
        /// Dataset directory the models predict on
        data: PathBuf,
        /// Checkpoint directories (at least two)
        #[arg(num_args = 2..)]
        ckpts: Vec<PathBuf>,
    },
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn error_class(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::Param(_) | Error::Geometry(_) => (1, "config"),
        Error::Shape(_) | Error::Data(_) | Error::Io { .. } => (2, "data"),
        Error::Divergence(_) => (3, "divergence"),
    }
}

fn dispatch(cli: Cli) -> vidsal::Result<()> {
    match cli.cmd {
        Cmd::SynthData { common } => {
            let over = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                ..Overrides::default()
            };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::synth_data(&exp)
        }
        Cmd::Train { common, model, epochs, data } => {
            let over = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                data,
                mode: model.mode,
                width: model.width,
                epochs,
                ..Overrides::default()
            };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::train_supervised(&exp)
        }
        Cmd::Distill { common, model, teacher, aux, epochs, data } => {
            let over = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                data,
                aux,
                teacher,
                mode: model.mode,
                width: model.width,
                epochs,
            };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::distill(&exp)
        }
        Cmd::Reduce { common, model, teacher, aux, epochs, data } => {
            let over = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                data,
                aux,
                teacher,
                mode: model.mode,
                width: model.width,
                epochs,
            };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::reduce(&exp)
        }
        Cmd::Eval { common, ckpt, data } => {
            let over = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                data,
                ..Overrides::default()
            };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::eval(&exp, &ckpt)
        }
        Cmd::Profile { config, out, model } => {
            let over = Overrides {
                mode: model.mode,
                width: model.width,
                ..Overrides::default()
            };
            let exp = Experiment::load(config.as_deref(), over)?;
            commands::profile(&exp, out.as_deref())
        }
        Cmd::Agree { common, data, ckpts } => {
            let over = Overrides { out: common.out.clone(), ..Overrides::default() };
            let exp = Experiment::load(common.config.as_deref(), over)?;
            commands::agree(&exp, &data, &ckpts)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                eprintln!("error kind=usage code=1: {}", one_line(&e.to_string()));
                return ExitCode::from(1);
            }
        },
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = error_class(&e);
            eprintln!("error kind={kind} code={code}: {}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
