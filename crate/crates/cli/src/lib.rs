//! Experiment runner for the federated poisoning laboratory: JSON plans,
//! scenario execution and CSV/JSON artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod plan;
pub mod records;
pub mod runner;
pub mod theory;

pub use error::{CliError, Result};
pub use plan::{
    load_config, parse_config, DataSpec, ExperimentPlan, Scenario, SweepAxis, SweepSpec,
    TheorySettings,
};
pub use records::{render_round_csv, write_round_csv, CSV_HEADER};
pub use runner::{run_plan, run_plan_with_data, RunResult, RunSummary};
