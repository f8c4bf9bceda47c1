//! JSON experiment plans.
//!
//! Every section is optional; missing keys fall back to the paper defaults
//! carried by [`SimConfig::default`].

use std::path::{Path, PathBuf};

use fsp_core::dataio::{load_fashion_mnist, synth_blobs, Dataset};
use fsp_core::numkit::RngStream;
use fsp_core::simulator::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable consulted when `data.dir` is absent.
pub const DATA_DIR_ENV: &str = "FSP_DATA_DIR";

pub const KAPPA_VALUES: [usize; 4] = [1, 2, 4, 8];
pub const BATCH_VALUES: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Single,
    DeltaPair,
    Sweep,
    TheoryChecks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "κ", alias = "kappa")]
    Kappa,
    B,
    M,
    #[serde(rename = "seed")]
    Seed,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Kappa => "κ",
            SweepAxis::B => "B",
            SweepAxis::M => "M",
            SweepAxis::Seed => "seed",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &SimConfig, value: f64) -> SimConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Kappa => cfg.attack.kappa = value as usize,
            SweepAxis::B => cfg.b = value as usize,
            SweepAxis::M => cfg.m = value,
            SweepAxis::Seed => cfg.seed = value as u64,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(CliError::config(
                "sweep.values",
                "at least one value required",
            ));
        }
        let whole = |v: f64| v >= 0.0 && v.fract() == 0.0;
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Kappa => whole(v) && KAPPA_VALUES.contains(&(v as usize)),
                SweepAxis::B => whole(v) && BATCH_VALUES.contains(&(v as usize)),
                SweepAxis::M => v > 0.0 && v <= 0.5,
                SweepAxis::Seed => whole(v),
            };
            if !ok {
                let allowed = match self.axis {
                    SweepAxis::Kappa => "one of 1, 2, 4, 8",
                    SweepAxis::B => "one of 8, 16, 32, 64",
                    SweepAxis::M => "in (0, 0.5]",
                    SweepAxis::Seed => "a non-negative integer",
                };
                return Err(CliError::config(
                    "sweep.values",
                    format!("{v} is not {allowed}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// IDX files in `dir`, or in `$FSP_DATA_DIR` when `dir` is absent.
    FashionMnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Gaussian blobs in `[0, 1]^dim`.
    Synth {
        #[serde(default = "Synth::n_train")]
        n_train: usize,
        #[serde(default = "Synth::n_test")]
        n_test: usize,
        #[serde(default = "Synth::dim")]
        dim: usize,
        #[serde(default = "Synth::classes")]
        classes: usize,
        #[serde(default = "Synth::spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

struct Synth;

impl Synth {
    fn n_train() -> usize {
        3000
    }
    fn n_test() -> usize {
        1000
    }
    fn dim() -> usize {
        20
    }
    fn classes() -> usize {
        10
    }
    fn spread() -> f64 {
        0.3
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::FashionMnist { dir: None }
    }
}

impl DataSpec {
    pub fn synth() -> Self {
        DataSpec::Synth {
            n_train: Synth::n_train(),
            n_test: Synth::n_test(),
            dim: Synth::dim(),
            classes: Synth::classes(),
            spread: Synth::spread(),
            seed: 0,
        }
    }

    /// Directory holding the IDX files, after the environment fallback.
    pub fn resolve_dir(dir: Option<&Path>) -> Result<PathBuf> {
        if let Some(d) = dir {
            return Ok(d.to_path_buf());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(CliError::config(
                "data.dir",
                format!("no dataset directory given and {DATA_DIR_ENV} is unset"),
            )),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::FashionMnist { dir } => {
                let dir = Self::resolve_dir(dir.as_deref())?;
                Ok(load_fashion_mnist(&dir)?)
            }
            DataSpec::Synth {
                n_train,
                n_test,
                dim,
                classes,
                spread,
                seed,
            } => {
                // one draw, then split, so train and test share cluster centres
                let mut rng = RngStream::new(*seed, 0);
                let all = synth_blobs(&mut rng, n_train + n_test, *dim, *classes, *spread)?;
                let train_idx: Vec<usize> = (0..*n_train).collect();
                let test_idx: Vec<usize> = (*n_train..n_train + n_test).collect();
                Ok((
                    all.subset(&train_idx, "synth/train")?,
                    all.subset(&test_idx, "synth/test")?,
                ))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let DataSpec::Synth {
            n_train,
            n_test,
            dim,
            classes,
            spread,
            ..
        } = self
        {
            if *n_train == 0 || *n_test == 0 {
                return Err(CliError::config(
                    "data.n_train",
                    "n_train and n_test must be >= 1",
                ));
            }
            if *dim == 0 {
                return Err(CliError::config("data.dim", "must be >= 1"));
            }
            if *classes < 2 {
                return Err(CliError::config("data.classes", "must be >= 2"));
            }
            if !(*spread > 0.0) {
                return Err(CliError::config("data.spread", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Sizes for the `theory_checks` scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySettings {
    pub seed: u64,
    /// Random quadratic problems, cycled over N = 2..=6.
    pub lemma1_instances: usize,
    /// Random LR configurations, cycled over B ∈ {4, 8} and N ∈ {5, 10}.
    pub theorem1_configs: usize,
    pub theorem1_trials: usize,
    #[serde(rename = "order_η", alias = "order_eta")]
    pub order_eta: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma1_instances: 20,
            theorem1_configs: 10,
            theorem1_trials: 200,
            order_eta: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub sim: SimConfig,
    pub sweep: Option<SweepSpec>,
    pub data: DataSpec,
    pub theory: TheorySettings,
    pub output: OutputSpec,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate().map_err(|e| match e {
            fsp_core::Error::InvalidArgument { name, reason } => {
                CliError::config(format!("sim.{name}"), reason)
            }
            other => CliError::config("sim", other.to_string()),
        })?;
        self.data.validate()?;
        match (&self.scenario, &self.sweep) {
            (Scenario::Sweep, None) => {
                return Err(CliError::config("sweep", "required by scenario \"sweep\""))
            }
            (_, Some(s)) => s.validate()?,
            _ => {}
        }
        if let Some(s) = &self.sweep {
            for &v in &s.values {
                s.axis.apply(&self.sim, v).validate().map_err(|e| {
                    CliError::config("sweep.values", format!("{} = {v}: {e}", s.axis.name()))
                })?;
            }
        }
        let t = &self.theory;
        if t.lemma1_instances == 0 || t.theorem1_configs == 0 || t.theorem1_trials == 0 {
            return Err(CliError::config(
                "theory",
                "instance, config and trial counts must be >= 1",
            ));
        }
        if !(t.order_eta > 0.0) {
            return Err(CliError::config("theory.order_η", "must be > 0"));
        }
        Ok(())
    }
}

/// Parse and validate a plan from JSON text.
pub fn parse_config(text: &str) -> Result<ExperimentPlan> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let plan: ExperimentPlan = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." {
            "<root>".to_string()
        } else {
            key
        };
        CliError::config(key, e.into_inner().to_string())
    })?;
    plan.validate()?;
    Ok(plan)
}

pub fn load_config(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config { key, reason } => {
            CliError::config(key, format!("{reason} (in {})", path.display()))
        }
        other => other,
    })
}
