use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsp_cli::datasets::fetch_check;
use fsp_cli::plan::{load_config, ExperimentPlan, Scenario};
use fsp_cli::runner::run_plan;
use fsp_cli::theory::TheoryReport;
use fsp_cli::{CliError, Result};

/// Order-exponent window accepted by `verify`.
const ORDER_EXPONENT: std::ops::RangeInclusive<f64> = 1.7..=2.3;
const LEMMA1_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(
    name = "fsp",
    version,
    about = "Federated sample-poisoning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a JSON plan.
    Run {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a plan's sweep section (the scenario is forced to `sweep`).
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Theory checks; exits 1 when any check fails.
    Verify {
        /// Plan whose `theory` section sets sizes and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset utilities.
    Datasets {
        #[command(subcommand)]
        command: DatasetsCommand,
    },
}

#[derive(Subcommand)]
enum DatasetsCommand {
    /// Validate Fashion-MNIST IDX files by magic number and counts.
    FetchCheck { dir: PathBuf },
}

fn plan_from(config: Option<&PathBuf>, out: Option<PathBuf>) -> Result<ExperimentPlan> {
    let mut plan = match config {
        Some(p) => load_config(p)?,
        None => ExperimentPlan::default(),
    };
    if let Some(o) = out {
        plan.output.dir = o;
    }
    Ok(plan)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("plain data serializes");
    text.push('\n');
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

fn theory_passes(r: &TheoryReport) -> bool {
    let order_ok = r
        .order_effect
        .exponent
        .is_some_and(|p| ORDER_EXPONENT.contains(&p));
    r.lemma1_gap < LEMMA1_TOL && r.theorem1_holds && order_ok
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut plan = plan_from(Some(&config), out)?;
            if let Some(s) = seed {
                plan.sim.seed = s;
            }
            print_json(&run_plan(&plan)?)?;
        }
        Command::Sweep { config, out } => {
            let mut plan = plan_from(Some(&config), out)?;
            plan.scenario = Scenario::Sweep;
            plan.validate()?;
            print_json(&run_plan(&plan)?)?;
        }
        Command::Verify { config, out } => {
            let mut plan = plan_from(config.as_ref(), out)?;
            plan.scenario = Scenario::TheoryChecks;
            let summary = run_plan(&plan)?;
            let report = summary.theory.expect("theory scenario yields a report");
            print_json(&report)?;
            if !theory_passes(&report) {
                eprintln!("theory checks failed");
                return Ok(1);
            }
        }
        Command::Datasets {
            command: DatasetsCommand::FetchCheck { dir },
        } => {
            let checks = fetch_check(&dir)?;
            print_json(&checks)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
