use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamoc_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mamoc", version, about = "Masked motion correction for 3D MRI volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set pretrain.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired phantom dataset and its manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Masked reconstruction training on clean scans.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the phase checkpoint if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Correction training on paired scans.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
        /// Start from a fresh initialization when no pretrain checkpoint exists.
        #[arg(long)]
        cold_start: bool,
    },
    /// Correct one volume (MVOL1 or NIfTI-1) with test-time prediction.
    Correct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Resample inputs whose grid differs from the model's.
        #[arg(long)]
        resample: bool,
    },
    /// Correct and score the held-out subjects.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let resolve = |c: &Common| RunConfig::resolve(c.config.as_deref(), &c.set);
    match cli.command {
        Command::Simulate { common } => commands::simulate(&resolve(&common)?),
        Command::Pretrain { common, resume } => commands::pretrain(&resolve(&common)?, resume),
        Command::Finetune { common, resume, cold_start } => commands::finetune(&resolve(&common)?, resume, cold_start),
        Command::Correct { common, input, output, resample } => commands::correct(&resolve(&common)?, &input, &output, resample),
        Command::Evaluate { common } => commands::evaluate(&resolve(&common)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
