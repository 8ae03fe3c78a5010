//! `bpar` — train and benchmark sampling-parallel Bayesian neural networks
//! from TOML run configurations.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 worker/transport failure, 4 numeric abort.

mod bench;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bpar_core::config::Config;
use bpar_core::EngineError;

#[derive(Debug, Parser)]
#[command(name = "bpar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set train.samples=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (falls back to $BPAR_OUT_DIR, then ./bpar-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker transport for multi-worker runs.
    #[arg(long, default_value = "inproc", value_parser = ["inproc", "socket"])]
    transport: String,
    /// Loopback rendezvous port for the socket transport.
    #[arg(long, default_value_t = 29500)]
    port: u16,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One training run per the configuration.
    Train(CommonArgs),
    /// Fixed-sample scaling sweep: speedup over worker counts for all
    /// three parallel strategies and both batch modes.
    BenchFixed(CommonArgs),
    /// Proportional-sample scaling sweep: efficiency with samples growing
    /// with workers.
    BenchProportional(CommonArgs),
    /// Runs the oracle suite and reports pass/fail per check.
    Verify(CommonArgs),
    /// Internal: one socket-transport worker of a multi-process run.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        world: usize,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<Config, EngineError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?,
        None => String::new(),
    };
    let overrides: Vec<(String, String)> = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    EngineError::config(format!("override {kv:?} is not of the form key=value"))
                })
        })
        .collect::<Result<_, _>>()?;
    Config::with_overrides(&text, &overrides)
}

fn out_dir(args: &CommonArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os("BPAR_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bpar-out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => load_config(args).and_then(|cfg| {
            run::train_command(&cfg, &out_dir(args), &args.transport, args.port)
        }),
        Command::BenchFixed(args) => load_config(args)
            .and_then(|cfg| bench::bench_fixed(&cfg, &out_dir(args))),
        Command::BenchProportional(args) => load_config(args)
            .and_then(|cfg| bench::bench_proportional(&cfg, &out_dir(args))),
        Command::Verify(args) => match load_config(args) {
            Ok(cfg) => {
                return if verify::run_all(&cfg) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => Err(e),
        },
        Command::Worker {
            rank,
            world,
            port,
            config,
            out,
        } => Config::load(config)
            .and_then(|cfg| run::worker_command(&cfg, *rank, *world, *port, out)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
