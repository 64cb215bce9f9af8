use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selfcal::config::ExperimentConfig;
use selfcal::pipeline::{self, BoundingBox, RunReport};
use selfcal::{HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "selfcal",
    version,
    about = "Train, calibrate and compare self-calibrating classifiers"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed, overriding the config and any sweep.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel runs for sweeps. Defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write each run's dataset as CSV with a provenance sidecar.
    GenData,
    /// Train with the configured method and evaluate on the test split.
    Train,
    /// Fit isotonic calibration on top of saved Standard runs.
    Calibrate,
    /// Re-evaluate saved runs of the configured method.
    Eval,
    /// Export the confidence surface of saved 2-D runs.
    Grid {
        /// Lattice points per axis.
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// x_min,x_max,y_min,y_max; defaults to the data extent plus 5 %.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bbox: Option<Vec<f64>>,
    },
    /// Tabulate every report under the output directory.
    Compare,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config is required for this command".into()))?;
    Ok(ExperimentConfig::load(path)?.with_overrides(cli.seed, cli.out.clone()))
}

fn print_report(r: &RunReport) {
    println!(
        "{} {} seed {}: accuracy {:.4}  ece {:.4}  mean confidence {:.4}  ({:.1} s)",
        r.dataset,
        r.method,
        r.seed,
        r.test_accuracy,
        r.test_ece,
        r.mean_confidence,
        r.wall_clock_seconds
    );
}

/// Runs `job` on every sweep entry, or once per dataset and seed with
/// `per_dataset`. Reports all failures and returns the first.
fn each_run<T: Send>(
    cli: &Cli,
    job: impl Fn(&ExperimentConfig) -> Result<T> + Sync,
    show: impl Fn(&T),
    per_dataset: bool,
) -> Result<()> {
    let mut runs = load_config(cli)?.runs();
    if per_dataset {
        // runs differing only in method share one dataset
        let mut seen = std::collections::BTreeSet::new();
        runs.retain(|r| seen.insert((r.label(), r.seed)));
    }
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut first_err = None;
    for (run, result) in runs.iter().zip(pipeline::run_parallel(&runs, jobs, job)) {
        match result {
            Ok(value) => show(&value),
            Err(e) => {
                eprintln!("{} {} seed {}: {e}", run.label(), run.method, run.seed);
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => each_run(
            cli,
            pipeline::generate_data,
            |p| println!("wrote {}", p.display()),
            true,
        ),
        Command::Train => each_run(cli, pipeline::run, print_report, false),
        Command::Calibrate => each_run(cli, pipeline::calibrate_saved, print_report, false),
        Command::Eval => each_run(cli, pipeline::evaluate_saved, print_report, false),
        Command::Grid { resolution, bbox } => {
            let bbox = match bbox.as_deref() {
                None => None,
                Some(&[x_min, x_max, y_min, y_max]) => Some(BoundingBox {
                    x_min,
                    x_max,
                    y_min,
                    y_max,
                }),
                Some(_) => return Err(HarnessError::Config("--bbox takes four numbers".into())),
            };
            each_run(
                cli,
                |cfg| pipeline::grid_saved(cfg, bbox, *resolution),
                |p| println!("wrote {}", p.display()),
                false,
            )
        }
        Command::Compare => {
            let root = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load_config(cli)?.output_dir,
                (None, None) => {
                    return Err(HarnessError::Config(
                        "compare needs --out or --config".into(),
                    ))
                }
            };
            let c = pipeline::compare_dir(&root)?;
            println!(
                "{:<16} {:<9} {:>4} {:>9} {:>8}",
                "dataset", "method", "runs", "accuracy", "ece"
            );
            for r in &c.rows {
                println!(
                    "{:<16} {:<9} {:>4} {:>9.4} {:>8.4}",
                    r.dataset, r.method, r.runs, r.median_accuracy, r.median_ece
                );
            }
            for d in &c.verdict.datasets {
                let names: Vec<&str> = d.lowest_ece.iter().map(|m| m.as_str()).collect();
                println!("lowest ece on {}: {}", d.dataset, names.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
