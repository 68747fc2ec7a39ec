use clap::{Args, Parser, Subcommand};
use lakesim::cli::{self, GenTraceArgs, RunArgs, SweepArgs};
use std::path::PathBuf;
use std::process::ExitCode;

/// Pooled prefix-cache cluster simulator.
#[derive(Parser)]
#[command(name = "lakesim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Trace file replacing the configured trace source.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Seed for the simulation and any generated trace.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides LAKESIM_OUT_DIR and the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl From<Common> for RunArgs {
    fn from(c: Common) -> Self {
        RunArgs {
            config: c.config,
            trace: c.trace,
            seed: c.seed,
            out: c.out,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace from a spec file.
    GenTrace {
        /// Trace spec (TOML), or an experiment config with [trace.spec].
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Output trace file.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Directory for trace.jsonl when --trace is absent.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run one simulation and write metrics.csv and summary.toml.
    Run(Common),
    /// Run one simulation per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. pool.slot_capacity.
        #[arg(long, value_name = "KEY")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_name = "CSVLIST", allow_hyphen_values = true)]
        values: String,
        /// Parallel runs; defaults to the logical core count.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Check a config and its trace without simulating.
    Validate(Common),
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenTrace {
            config,
            trace,
            seed,
            out,
        } => {
            cli::cmd_gen_trace(&GenTraceArgs {
                config,
                trace,
                seed,
                out,
            })?;
        }
        Command::Run(c) => {
            cli::cmd_run(&c.into())?;
        }
        Command::Sweep {
            common,
            param,
            values,
            jobs,
        } => {
            let values = cli::parse_values(&values)?;
            cli::cmd_sweep(&SweepArgs {
                run: common.into(),
                param,
                values,
                jobs,
            })?;
        }
        Command::Validate(c) => {
            cli::cmd_validate(&c.into())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
