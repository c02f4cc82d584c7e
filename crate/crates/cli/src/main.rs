mod config;
mod run;
mod table;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use dcdp::operators::adjoint_residual;
use dcdp::rng::{derive_seed, seeded, standard_normal};
use dcdp::tasks::{parse_shape, OperatorSpec};

#[derive(Parser)]
#[command(name = "dcdp", version, about = "Run and summarize DCDP inverse-problem experiments")]
struct Cli {
    /// Maximum number of grid cells solved concurrently (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and write results.csv.
    Run { config: PathBuf },
    /// Mean ± std per (task, σ_y, method) of a results.csv.
    Table {
        results: PathBuf,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Randomized inner-product test of an operator, e.g. `gaussian:9:1.5`.
    AdjointCheck {
        operator: String,
        #[arg(long, default_value = "32x32")]
        shape: String,
        #[arg(long, default_value_t = 20)]
        trials: u64,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let opts = run::RunOptions {
                jobs: cli.jobs,
                seed: cli.seed,
                out: cli.out,
            };
            let summary = run::run_experiment(&config, &opts)?;
            let results = summary.out.join("results.csv");
            let groups = table::summarize(fs::File::open(&results)?)?;
            fs::write(summary.out.join("summary.csv"), table::to_csv(&groups)?)?;
            print!("{}", table::to_text(&groups));
            eprintln!(
                "{} cells, {} failed; results in {}",
                summary.cells,
                summary.failed,
                results.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Table { results, csv } => {
            let file = fs::File::open(&results).with_context(|| format!("opening {}", results.display()))?;
            let groups = table::summarize(file)?;
            print!("{}", table::to_text(&groups));
            if let Some(path) = csv {
                fs::write(&path, table::to_csv(&groups)?).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AdjointCheck {
            operator,
            shape,
            trials,
            tolerance,
        } => {
            let spec: OperatorSpec = operator.parse().map_err(|e| anyhow!("{e}"))?;
            let shape = parse_shape(&shape)?;
            let op = spec.build::<f64>(shape)?;
            let master = cli.seed.unwrap_or(0);
            let worst = (0..trials)
                .map(|i| {
                    let x: Vec<f64> = standard_normal(&mut seeded(derive_seed(master, 2 * i)), shape.len());
                    let y: Vec<f64> =
                        standard_normal(&mut seeded(derive_seed(master, 2 * i + 1)), op.out_shape().len());
                    adjoint_residual(op.as_ref(), &x, &y)
                })
                .fold(0.0, f64::max);
            let pass = worst < tolerance;
            println!(
                "{} {spec} on {shape}: max relative residual {worst:.3e} over {trials} trials (tolerance {tolerance:.0e})",
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
