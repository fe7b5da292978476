use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use greenlab::lab::{run_scenario, RunOptions};
use greenlab::series::Precision;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "greenlab", about = "Green-function laboratory for random walks on free products", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Double,
    Dd,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and emit its artifacts.
    Run {
        /// Path to the scenario JSON.
        scenario: PathBuf,
        /// Output directory (default: <scenario dir>/out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bypass the content-addressed cache.
        #[arg(long)]
        no_cache: bool,
        /// Worker threads for sweeps and parallel tasks.
        #[arg(long)]
        threads: Option<usize>,
        /// Floating-point accumulation mode.
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, no_cache, threads, precision } => {
            let opts = RunOptions {
                out_dir: out.clone(),
                no_cache,
                threads,
                precision_override: precision.map(|p| match p {
                    PrecisionArg::Double => Precision::Double,
                    PrecisionArg::Dd => Precision::DoubleDouble,
                }),
            };
            let started = std::time::Instant::now();
            let (output, cache_hit) = run_scenario(&scenario, &opts)?;
            let out_dir = opts
                .out_dir
                .unwrap_or_else(|| scenario.parent().unwrap_or(std::path::Path::new(".")).join("out"));
            eprintln!(
                "greenlab: scenario {} -> {} ({}, {:.2?})",
                scenario.display(),
                out_dir.display(),
                if cache_hit { "cache hit" } else { "computed" },
                started.elapsed()
            );
            if let Some(r) = output.radius {
                eprintln!("greenlab: R = {r:.17e}");
            }
            Ok(())
        }
    }
}
