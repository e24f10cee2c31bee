use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pama::bench::BenchOptions;
use pama::commands;
use pama::CliError;

#[derive(Parser)]
#[command(name = "pama", version, about = "Multi-objective policy optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write metrics, summary and checkpoint.
    Train { config: PathBuf },
    /// Solve the scalar min-norm problem for the given advantages.
    Solve {
        /// One advantage value; repeat for each objective.
        #[arg(short = 'a', allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Time the closed form against Gram matrix plus Frank-Wolfe.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = BenchOptions::default().n_range)]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = BenchOptions::default().d_range)]
        d: Vec<usize>,
        #[arg(long, default_value_t = BenchOptions::default().repeats)]
        repeats: usize,
        #[arg(long, default_value_t = BenchOptions::default().warmup)]
        warmup: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Report the stationarity residual at a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a complete config with every default filled in.
    ExampleConfig {
        #[arg(long)]
        theory: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let out = commands::train(&config)?;
            eprintln!("wrote {}", out.dir.display());
        }
        Command::Solve { values } => {
            let out = commands::solve(&values)?;
            println!("{}", serde_json::to_string(&out)?);
        }
        Command::Bench {
            n,
            d,
            repeats,
            warmup,
            out,
        } => {
            let opts = BenchOptions {
                n_range: n,
                d_range: d,
                repeats,
                warmup,
                ..BenchOptions::default()
            };
            let rows = commands::bench(&opts, &out)?;
            eprintln!("wrote {rows} rows to {}", out.display());
        }
        Command::Analyze { checkpoint, config } => {
            let report = commands::analyze(&checkpoint, &config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ExampleConfig { theory } => print!("{}", commands::example_config(theory)),
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
