mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::RunConfig;

/// Gradient-guided diffusion sampling and generative optimization.
#[derive(Parser, Debug)]
#[command(name = "gradguide", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Fit the configured score class and write the model.
    Fit,
    /// Draw a guided batch and write samples and statistics.
    Sample,
    /// Guidance-only optimization; writes a per-round trajectory.
    Alg1,
    /// Guidance with adaptive bias fine-tuning; writes a per-round trajectory.
    Alg2,
    /// Run the verification suite; exits nonzero if any check fails.
    Verify,
    /// Write the CSVs behind the comparison and reward figures.
    Figures,
}

fn run(cli: Cli) -> gradguide::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| gradguide::Error::config("threads", e.to_string()))?;
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::Fit => commands::cmd_fit(&ctx)?,
        Command::Sample => commands::cmd_sample(&ctx)?,
        Command::Alg1 => commands::cmd_alg1(&ctx)?,
        Command::Alg2 => commands::cmd_alg2(&ctx)?,
        Command::Verify => return commands::cmd_verify(&ctx),
        Command::Figures => commands::cmd_figures(&ctx)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
