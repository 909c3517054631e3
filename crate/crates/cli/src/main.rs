use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mftc_cli::config::parse_config;
use mftc_cli::run::{build_problem, output_dir, run, OUT_DIR_ENV};
use mftc_core::cases::{describe, BUILT_IN};

/// Mean-field-type control with congestion, solved by ADMM.
#[derive(Parser)]
#[command(name = "mftc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem described by a configuration file
    Solve {
        config: PathBuf,
        /// output directory (overrides the config and the environment)
        #[arg(long)]
        out: Option<PathBuf>,
        /// worker threads, 0 for all cores
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the built-in scenarios
    Scenarios,
    /// Validate a configuration file without solving
    Check { config: PathBuf },
}

fn load(path: &Path) -> Result<(mftc_cli::config::RunConfig, PathBuf)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn main_inner(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Scenarios => {
            for name in BUILT_IN {
                println!("{name:<14} {}", describe(name));
            }
            Ok(0)
        }
        Command::Check { config } => {
            let (cfg, base) = load(&config)?;
            let (_, problem) = build_problem(&cfg, &base)?;
            println!(
                "ok: {} admissible nodes x {} time slices",
                problem.geom.n_nodes(),
                problem.geom.nt() + 1
            );
            Ok(0)
        }
        Command::Solve { config, out, threads } => {
            let (mut cfg, base) = load(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let env = std::env::var(OUT_DIR_ENV).ok();
            let dir = output_dir(out.as_deref(), &cfg, env.as_deref());
            let outcome = run(&cfg, &base, &dir)?;
            println!("{:?}; outputs in {}", outcome.stop, outcome.dir.display());
            Ok(outcome.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
