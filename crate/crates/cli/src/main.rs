use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlmpc_cli::{cmd_benchmark, cmd_check, cmd_generate, cmd_run, load_config, CliError};

/// Distributed localized MPC experiments on randomized power-grid meshes.
#[derive(Parser)]
#[command(name = "dlmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config entry (repeatable), e.g. `--set d=2`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write model, constraint and initial-state files.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Closed-loop simulation; writes trajectory and telemetry CSVs.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `generate`; generated in memory when absent.
        #[arg(short, long)]
        instance: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Runtime sweep over N, d or T.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV output path; stdout only when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Localizability and a distributed-versus-centralized smoke test.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Generate { cfg, out: dir } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_generate(&cfg, &dir, &mut out)?;
        }
        Command::Run { cfg, instance, out: dir } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_run(&cfg, instance.as_deref(), &dir, &mut out)?;
        }
        Command::Benchmark { cfg, out: path } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_benchmark(&cfg, path.as_deref(), &mut out)?;
        }
        Command::Check { cfg } => {
            let cfg = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cmd_check(&cfg, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
