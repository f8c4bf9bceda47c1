//! The `theory_checks` scenario: permutation identity, variance bound and
//! order-effect scaling on small synthetic problems.

use fsp_core::analysis::{
    lemma1_check, order_effect_probe, theorem1_check, OrderEffectReport, QuadraticProblem,
    Theorem1Config, Theorem1Report,
};
use fsp_core::dataio::synth_blobs;
use fsp_core::models::{Model, ModelSpec};
use fsp_core::numkit::RngStream;
use serde::Serialize;

use crate::error::Result;
use crate::plan::TheorySettings;

pub const LEMMA1_SIZES: [usize; 5] = [2, 3, 4, 5, 6];
pub const THEOREM1_SHAPES: [(usize, usize); 4] = [(4, 5), (4, 10), (8, 5), (8, 10)];
pub const LEMMA1_DIM: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Case {
    pub batch_size: usize,
    pub n_batches: usize,
    pub data_seed: u64,
    #[serde(flatten)]
    pub report: Theorem1Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    /// Largest gap over every quadratic instance.
    pub lemma1_gap: f64,
    pub lemma1_instances: usize,
    pub theorem1: Vec<Theorem1Case>,
    pub theorem1_negative_rhs: usize,
    /// Bound holds on every case with a non-negative right-hand side.
    pub theorem1_holds: bool,
    pub order_effect: OrderEffectReport,
}

pub fn lemma1_max_gap(settings: &TheorySettings) -> Result<f64> {
    let mut rng = RngStream::derive(settings.seed, &[1]);
    let mut worst: f64 = 0.0;
    for i in 0..settings.lemma1_instances {
        let n = LEMMA1_SIZES[i % LEMMA1_SIZES.len()];
        let p = QuadraticProblem::random(&mut rng, n, LEMMA1_DIM)?;
        worst = worst.max(lemma1_check(&p)?.gap);
    }
    Ok(worst)
}

/// LR on 2-d, 3-class blobs with `B * N` rows; one fresh dataset per case.
pub fn theorem1_cases(settings: &TheorySettings) -> Result<Vec<Theorem1Case>> {
    let spec = ModelSpec::lr(2, 3)?;
    (0..settings.theorem1_configs)
        .map(|i| {
            let (b, n) = THEOREM1_SHAPES[i % THEOREM1_SHAPES.len()];
            let data_seed = settings.seed.wrapping_mul(1000).wrapping_add(i as u64);
            let ds = synth_blobs(&mut RngStream::derive(data_seed, &[2]), b * n, 2, 3, 0.35)?;
            let cfg = Theorem1Config {
                batch_size: b,
                n_batches: n,
                trials: settings.theorem1_trials,
                ..Theorem1Config::default()
            };
            let report = theorem1_check(spec, &ds, &cfg, &mut RngStream::derive(data_seed, &[3]))?;
            Ok(Theorem1Case {
                batch_size: b,
                n_batches: n,
                data_seed,
                report,
            })
        })
        .collect()
}

/// Forward vs reversed batch order for logistic regression at η, η/2, η/4.
pub fn order_effect(settings: &TheorySettings) -> Result<OrderEffectReport> {
    let ds = synth_blobs(&mut RngStream::derive(settings.seed, &[4]), 64, 4, 3, 0.2)?;
    let m = Model::init(
        ModelSpec::lr(4, 3)?,
        &mut RngStream::derive(settings.seed, &[5]),
    )?;
    Ok(order_effect_probe(
        &m,
        &ds,
        settings.order_eta,
        8,
        &mut RngStream::derive(settings.seed, &[6]),
    )?)
}

pub fn run_theory_checks(settings: &TheorySettings) -> Result<TheoryReport> {
    let lemma1_gap = lemma1_max_gap(settings)?;
    let theorem1 = theorem1_cases(settings)?;
    let theorem1_negative_rhs = theorem1.iter().filter(|c| c.report.negative_rhs).count();
    let theorem1_holds = theorem1
        .iter()
        .filter(|c| !c.report.negative_rhs)
        .all(|c| c.report.holds);
    Ok(TheoryReport {
        lemma1_gap,
        lemma1_instances: settings.lemma1_instances,
        theorem1,
        theorem1_negative_rhs,
        theorem1_holds,
        order_effect: order_effect(settings)?,
    })
}
