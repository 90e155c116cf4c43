//! `tadistill`: generate data, train the teacher, assistant and student
//! stages, evaluate checkpoints and run the ablation grid.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tadistill_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tadistill",
    version,
    about = "Teacher -> assistant -> student distillation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (flat key = value file); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `seed` (`data_seed` for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `repeats`.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Teacher,
    Assistant,
    Student,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Guide {
    Assistant,
    Teacher,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic train and test sets into the output directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage of the pipeline.
    Train {
        stage: Stage,
        /// Model whose soft labels and features guide the student.
        #[arg(long, value_enum, default_value = "assistant")]
        guide: Guide,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Student alone, teacher -> student and teacher -> assistant -> student,
    /// each over `repeats` seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a folder of PGM/PPM images (one subdirectory per class) into a dataset split.
    Import {
        /// Folder with one subdirectory per class.
        #[arg(long)]
        images: PathBuf,
        /// Split to write.
        #[arg(long, value_parser = ["train", "test"])]
        split: String,
        /// Skip unreadable files instead of failing.
        #[arg(long)]
        permissive: bool,
        #[command(flatten)]
        common: Common,
    },
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING_DEPENDENCY: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::MissingDependency { .. }) => EXIT_MISSING_DEPENDENCY,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
