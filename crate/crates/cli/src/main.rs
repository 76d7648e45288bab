//! `nball`: kernels, closed-loop simulations and the three-ball experiment
//! bundle from one JSON config.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 numerical
//! failure (including residual checks above tolerance).

mod commands;
mod config;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;
use config::RunConfig;
use error::CliError;
use output::{resolve_dir, Output, OUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "nball", version, about = "Backstepping kernels and boundary-controlled reaction-diffusion on n-balls")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (overrides NBALL_OUT_DIR and output.directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for kernel solves and per-mode simulation.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ConfigArg {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve kernels for the controlled degrees and check their residuals.
    Kernel(ConfigArg),
    /// Run the configured loop for every mode up to the band limit.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides sim.seed.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
    /// Print and write the mode plan.
    Modeplan(ConfigArg),
    /// Kernels, gains, open-loop and output-feedback runs for the 3-ball example.
    ReproducePaper {
        /// Replaces the built-in example configuration.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Overrides sim.seed.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let (config, seed) = match &cli.command {
        Command::Kernel(c) | Command::Modeplan(c) => (load(&c.config)?, None),
        Command::Simulate { config, seed } => (load(&config.config)?, *seed),
        Command::ReproducePaper { config, seed } => {
            let c = match config {
                Some(p) => load(p)?,
                None => RunConfig::three_ball(),
            };
            (c, *seed)
        }
    };
    let env = std::env::var(OUT_DIR_ENV).ok();
    let dir = resolve_dir(cli.out.as_deref(), env.as_deref(), config.output.directory.as_deref());
    let seed = seed.unwrap_or(config.sim.seed);
    let ctx = Context::new(config)?;
    let mut out = Output::new(dir, &ctx.config.output.formats)?;
    let report = match cli.command {
        Command::Kernel(_) => commands::kernel(&ctx, &mut out)?,
        Command::Modeplan(_) => commands::modeplan(&ctx, &mut out)?,
        Command::Simulate { .. } => commands::simulate_cmd(&ctx, seed, &mut out)?,
        Command::ReproducePaper { .. } => commands::reproduce(&ctx, seed, &mut out)?,
    };
    Ok(format!(
        "{}\nwrote {} files to {}",
        report.trim_end(),
        out.written().len(),
        out.root().display()
    ))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
