//! Scenario execution and artifact writing.

use std::path::{Path, PathBuf};

use fsp_core::baselines::AttackConfig;
use fsp_core::dataio::Dataset;
use fsp_core::simulator::{attack_impact, run_simulation, RoundRecord, SimConfig};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::plan::{ExperimentPlan, Scenario, SweepAxis};
use crate::records::{write_round_csv, write_text};
use crate::theory::{run_theory_checks, TheoryReport};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const THEORY_FILE: &str = "theory.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub label: String,
    pub attack: String,
    pub agg: String,
    pub seed: u64,
    pub max_test_acc: f64,
    pub final_test_acc: f64,
    /// Attack impact against the matching no-attack run, in points.
    pub delta: Option<f64>,
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub runs: Vec<RunResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryReport>,
}

pub fn max_test_acc(records: &[RoundRecord]) -> f64 {
    records
        .iter()
        .map(|r| r.test_acc)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn simulate(
    cfg: &SimConfig,
    train: &Dataset,
    test: &Dataset,
    label: &str,
) -> Result<Vec<RoundRecord>> {
    let out = run_simulation(cfg, train, test)?;
    eprintln!(
        "{label}: attack={} agg={} seed={} max test acc {:.4}",
        cfg.attack.kind.name(),
        cfg.agg.rule.name(),
        cfg.seed,
        max_test_acc(&out.records)
    );
    Ok(out.records)
}

fn result(
    label: &str,
    cfg: &SimConfig,
    records: &[RoundRecord],
    delta: Option<f64>,
    csv: PathBuf,
) -> RunResult {
    RunResult {
        label: label.to_string(),
        attack: cfg.attack.kind.name().to_string(),
        agg: cfg.agg.rule.name().to_string(),
        seed: cfg.seed,
        max_test_acc: max_test_acc(records),
        final_test_acc: records.last().map_or(f64::NAN, |r| r.test_acc),
        delta,
        csv,
    }
}

fn baseline_of(cfg: &SimConfig) -> SimConfig {
    SimConfig {
        attack: AttackConfig::none(),
        ..cfg.clone()
    }
}

fn file_tag(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Kappa => "kappa",
        SweepAxis::B => "B",
        SweepAxis::M => "M",
        SweepAxis::Seed => "seed",
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Run a validated plan against preloaded data, writing artifacts under
/// `plan.output.dir`.
pub fn run_plan_with_data(
    plan: &ExperimentPlan,
    data: Option<(&Dataset, &Dataset)>,
) -> Result<RunSummary> {
    let dir = &plan.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let need_data = || data.ok_or_else(|| CliError::config("data", "scenario needs a dataset"));
    let mut runs = Vec::new();
    let mut theory = None;
    match plan.scenario {
        Scenario::Single => {
            let (train, test) = need_data()?;
            let records = simulate(&plan.sim, train, test, "single")?;
            let csv = dir.join("rounds.csv");
            write_round_csv(&records, &csv)?;
            runs.push(result("single", &plan.sim, &records, None, csv));
        }
        Scenario::DeltaPair => {
            let (train, test) = need_data()?;
            let base_cfg = baseline_of(&plan.sim);
            let base = simulate(&base_cfg, train, test, "baseline")?;
            let attacked = simulate(&plan.sim, train, test, "attacked")?;
            let delta = attack_impact(&base, &attacked)?;
            let (bp, ap) = (dir.join("baseline.csv"), dir.join("attacked.csv"));
            write_round_csv(&base, &bp)?;
            write_round_csv(&attacked, &ap)?;
            runs.push(result("baseline", &base_cfg, &base, None, bp));
            runs.push(result("attacked", &plan.sim, &attacked, Some(delta), ap));
            eprintln!("delta = {delta:.4} points");
        }
        Scenario::Sweep => {
            let (train, test) = need_data()?;
            let spec = plan
                .sweep
                .as_ref()
                .ok_or_else(|| CliError::config("sweep", "missing"))?;
            let mut baselines: Vec<(SimConfig, Vec<RoundRecord>)> = Vec::new();
            let mut table = String::from("axis,value,max_test_acc,delta\n");
            for &v in &spec.values {
                let cfg = spec.axis.apply(&plan.sim, v);
                let bcfg = baseline_of(&cfg);
                let bi = match baselines.iter().position(|(c, _)| *c == bcfg) {
                    Some(i) => i,
                    None => {
                        let label = format!("baseline {}={v}", spec.axis.name());
                        let recs = simulate(&bcfg, train, test, &label)?;
                        let csv = dir.join(format!("baseline_{}.csv", baselines.len()));
                        write_round_csv(&recs, &csv)?;
                        runs.push(result(&label, &bcfg, &recs, None, csv));
                        baselines.push((bcfg, recs));
                        baselines.len() - 1
                    }
                };
                let label = format!("{}={v}", spec.axis.name());
                let recs = simulate(&cfg, train, test, &label)?;
                let delta = attack_impact(&baselines[bi].1, &recs)?;
                let csv = dir.join(format!("sweep_{}_{v}.csv", file_tag(spec.axis)));
                write_round_csv(&recs, &csv)?;
                table.push_str(&format!(
                    "{},{v},{:.6},{:.6}\n",
                    spec.axis.name(),
                    max_test_acc(&recs),
                    delta
                ));
                runs.push(result(&label, &cfg, &recs, Some(delta), csv));
            }
            write_text(&dir.join(SWEEP_FILE), &table)?;
        }
        Scenario::TheoryChecks => {
            let report = run_theory_checks(&plan.theory)?;
            write_text(&dir.join(THEORY_FILE), &to_json(&report))?;
            theory = Some(report);
        }
    }
    let summary = RunSummary {
        scenario: plan.scenario,
        runs,
        theory,
    };
    write_text(&dir.join(SUMMARY_FILE), &to_json(&summary))?;
    Ok(summary)
}

/// Load the plan's dataset (unless the scenario needs none) and run it.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunSummary> {
    if plan.scenario == Scenario::TheoryChecks {
        return run_plan_with_data(plan, None);
    }
    let (train, test) = plan.data.load()?;
    run_plan_with_data(plan, Some((&train, &test)))
}

/// Artifact path relative to the plan's output directory.
pub fn artifact(plan: &ExperimentPlan, name: &str) -> PathBuf {
    Path::new(&plan.output.dir).join(name)
}
