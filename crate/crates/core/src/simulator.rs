//! Federated training loop with compromised clients, defenses and
//! robust aggregation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggConfig, AggRule, Update};
use crate::baselines::{
    fgsm_poison, flip_labels, gaussian_update, zero_update, AttackConfig, AttackKind,
};
use crate::dataio::{
    partition_dirichlet, partition_iid, partition_two_class, split_validation, Dataset, Partition,
};
use crate::detect::{
    apply_weights, foolsgold_weights, pca_filter, UpdateHistory, DEFAULT_THRESHOLD_Z,
};
use crate::error::{invalid, Error, Result};
use crate::metasampler::{MetaSampler, MetaTrainConfig, SacAgent, SacConfig};
use crate::models::{Arch, Model, ModelSpec};
use crate::numkit::{RngStream, Vec64};
use crate::sampling::{self, HardPool, IndexBatches};

/// RNG stream purposes; combined with round and client ids.
mod purpose {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const LOCAL: u64 = 4;
    pub const SURROGATE: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const AGENT: u64 = 7;
    pub const ROOT: u64 = 8;
    pub const EVAL: u64 = 9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    #[serde(rename = "iid")]
    Iid,
    #[serde(rename = "two_class")]
    TwoClass,
    #[serde(rename = "dirichlet")]
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefenseKind {
    PCA,
    FoolsGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggSettings {
    pub rule: AggRule,
    /// Values trimmed per side; `None` picks `max(1, round(M * n))`.
    #[serde(rename = "trim_β", alias = "trim_beta")]
    pub trim_beta: Option<usize>,
    /// Assumed Byzantine count; `None` picks `max(1, round(M * n))`.
    pub krum_f: Option<usize>,
    /// Size of the server's clean root set.
    pub root_size: usize,
}

impl Default for AggSettings {
    fn default() -> Self {
        Self {
            rule: AggRule::FedAvg,
            trim_beta: None,
            krum_f: None,
            root_size: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSettings {
    #[serde(rename = "σ", alias = "sigma")]
    pub sigma: f64,
    #[serde(rename = "b", alias = "bins")]
    pub bins: usize,
    pub n_random: usize,
    pub n_update: usize,
    pub surrogate_hidden: usize,
    pub surrogate_epochs: usize,
    pub surrogate_lr: f64,
}

impl Default for MetaSettings {
    fn default() -> Self {
        let m = MetaTrainConfig::default();
        Self {
            sigma: m.sigma,
            bins: m.bins,
            n_random: m.n_random,
            n_update: m.n_update,
            surrogate_hidden: 32,
            surrogate_epochs: 3,
            surrogate_lr: m.surrogate_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub q: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "E_local")]
    pub e_local: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "η", alias = "eta")]
    pub eta: f64,
    pub arch: Arch,
    pub hidden_dim: usize,
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
    pub agg: AggSettings,
    pub defense: Option<DefenseKind>,
    pub threshold_z: f64,
    pub attack: AttackConfig,
    pub meta: MetaSettings,
    /// Training rows scored for `train_acc` each round (a fixed random subset).
    pub train_eval_size: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 100,
            q: 0.1,
            m: 0.1,
            t: 100,
            e_local: 5,
            b: 32,
            eta: 0.001,
            arch: Arch::LR,
            hidden_dim: 32,
            partition: PartitionKind::Iid,
            dirichlet_alpha: 0.5,
            agg: AggSettings::default(),
            defense: None,
            threshold_z: DEFAULT_THRESHOLD_Z,
            attack: AttackConfig::none(),
            meta: MetaSettings::default(),
            train_eval_size: 10_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("K", "must be >= 1"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(invalid("q", "must lie in (0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.m) {
            return Err(invalid("M", "must lie in [0, 0.5]"));
        }
        if self.t == 0 || self.t > 250 {
            return Err(invalid("T", "must lie in 1..=250"));
        }
        if self.b == 0 {
            return Err(invalid("B", "must be >= 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("η", "must be finite and > 0"));
        }
        if self.arch == Arch::MLP && self.hidden_dim == 0 {
            return Err(invalid("hidden_dim", "must be >= 1 for MLP"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(invalid("dirichlet_alpha", "must be > 0"));
        }
        if !(self.threshold_z > 0.0) {
            return Err(invalid("threshold_z", "must be > 0"));
        }
        if self.agg.rule == AggRule::FLTrust && self.agg.root_size == 0 {
            return Err(invalid("root_size", "FLTrust needs a non-empty root set"));
        }
        let meta = &self.meta;
        if !(meta.sigma > 0.0) {
            return Err(invalid("σ", "must be > 0"));
        }
        if meta.bins == 0 {
            return Err(invalid("b", "must be >= 1"));
        }
        if meta.n_random == 0 || meta.n_update == 0 {
            return Err(invalid("n_random", "n_random and n_update must be >= 1"));
        }
        if meta.surrogate_hidden == 0 {
            return Err(invalid("surrogate_hidden", "must be >= 1"));
        }
        if !(meta.surrogate_lr > 0.0) {
            return Err(invalid("surrogate_lr", "must be > 0"));
        }
        self.attack.validate()
    }

    pub fn num_selected(&self) -> usize {
        ((self.q * self.k as f64) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn num_compromised(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            return 0;
        }
        (self.m * self.k as f64 + 1e-9).floor() as usize
    }

    fn default_byzantine(&self, n: usize) -> usize {
        ((self.m * n as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub selected: Vec<usize>,
    pub flagged: Vec<usize>,
    pub agg: AggRule,
    pub attack: AttackKind,
    pub seed: u64,
    pub wallclock_secs: f64,
}

#[derive(Debug, Clone)]
pub enum SamplerState {
    Honest,
    TopK(Option<HardPool>),
    Meta(Option<Box<MetaSampler>>),
    LossOrder,
}

#[derive(Debug, Clone)]
pub struct ClientRuntime {
    pub client_id: usize,
    pub compromised: bool,
    pub shard: Vec<usize>,
    /// Held-out tail of the shard, for compromised clients only.
    pub val: Vec<usize>,
    pub surrogate: Option<Model>,
    pub sampler: SamplerState,
}

impl ClientRuntime {
    pub fn honest(client_id: usize, shard: Vec<usize>) -> Self {
        Self {
            client_id,
            compromised: false,
            shard,
            val: vec![],
            surrogate: None,
            sampler: SamplerState::Honest,
        }
    }

    /// Shard minus the validation tail.
    fn train_part(&self) -> &[usize] {
        &self.shard[..self.shard.len() - self.val.len()]
    }
}

/// `ceil(q K)` distinct ids, uniformly without replacement, in ascending order.
pub fn select_clients(rng: &mut RngStream, k: usize, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid("q", "must lie in (0, 1]"));
    }
    let n = ((q * k as f64) - 1e-9).ceil() as usize;
    if n == 0 {
        return Err(invalid("q", "selects no clients"));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    // partial Fisher-Yates
    for i in 0..n {
        let j = i + rng.below(k - i);
        ids.swap(i, j);
    }
    ids.truncate(n);
    ids.sort_unstable();
    Ok(ids)
}

fn run_epochs(
    model: &mut Model,
    ds: &Dataset,
    eta: f64,
    epochs: usize,
    mut next_batches: impl FnMut(usize) -> Result<IndexBatches>,
) -> Result<()> {
    for e in 0..epochs {
        let batches = next_batches(e)?;
        model.sgd_on_indices(&ds.xs, &ds.ys, &batches, eta)?;
    }
    Ok(())
}

/// Honest local training: `epochs` passes of shuffled mini-batches.
pub fn honest_delta(
    global: &Model,
    ds: &Dataset,
    shard: &[usize],
    cfg: &SimConfig,
    rng: &mut RngStream,
) -> Result<Vec64> {
    let mut local = global.clone();
    run_epochs(&mut local, ds, cfg.eta, cfg.e_local, |_| {
        sampling::uniform_batches(rng, shard, cfg.b)
    })?;
    local.params.sub(&global.params)
}

/// Trains a client for one round and returns its (possibly malicious) update.
pub fn local_round(
    client: &mut ClientRuntime,
    global: &Model,
    ds: &Dataset,
    cfg: &SimConfig,
    rng: &mut RngStream,
) -> Result<Update> {
    if client.shard.is_empty() {
        return Err(invalid(
            "shard",
            format!("client {} has no data", client.client_id),
        ));
    }
    let n = client.shard.len();
    let steps = sampling::batches_per_epoch(n, cfg.b);
    let kind = if client.compromised {
        cfg.attack.kind
    } else {
        AttackKind::None
    };
    let delta = match kind {
        AttackKind::None | AttackKind::LFA | AttackKind::AA => {
            honest_delta(global, ds, &client.shard, cfg, rng)?
        }
        AttackKind::ZA => zero_update(global.params.len()),
        AttackKind::GA => {
            let honest = honest_delta(global, ds, &client.shard, cfg, rng)?;
            gaussian_update(rng, &honest, cfg.attack.ga_variance)?
        }
        AttackKind::TopK => {
            let SamplerState::TopK(pool) = &mut client.sampler else {
                return Err(invalid("sampler", "TopK client without a pool slot"));
            };
            if pool.is_none() {
                let surrogate = client
                    .surrogate
                    .as_ref()
                    .ok_or_else(|| invalid("surrogate", "TopK client without a surrogate"))?;
                // a shard smaller than kappa * B pools all of its samples
                let size = cfg.attack.kappa.saturating_mul(cfg.b).min(n);
                *pool = Some(sampling::build_hard_pool(
                    surrogate,
                    ds,
                    &client.shard,
                    size,
                    1,
                )?);
            }
            let pool = pool.as_ref().expect("just built");
            let mut local = global.clone();
            run_epochs(&mut local, ds, cfg.eta, cfg.e_local, |_| {
                sampling::topk_batches(rng, pool, steps, cfg.b)
            })?;
            local.params.sub(&global.params)?
        }
        AttackKind::LossOrder => {
            let surrogate = client
                .surrogate
                .as_ref()
                .ok_or_else(|| invalid("surrogate", "LossOrder client without a surrogate"))?;
            let order = sampling::loss_order_batches(surrogate, ds, &client.shard, cfg.b, true)?;
            let mut local = global.clone();
            run_epochs(&mut local, ds, cfg.eta, cfg.e_local, |_| Ok(order.clone()))?;
            local.params.sub(&global.params)?
        }
        AttackKind::Meta => meta_delta(client, global, ds, cfg, steps, rng)?,
    };
    Update::new(client.client_id, delta, n)
}

fn meta_delta(
    client: &mut ClientRuntime,
    global: &Model,
    ds: &Dataset,
    cfg: &SimConfig,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec64> {
    let train: Vec<usize> = client.train_part().to_vec();
    let val = client.val.clone();
    let SamplerState::Meta(slot) = &mut client.sampler else {
        return Err(invalid("sampler", "Meta client without an agent slot"));
    };
    if slot.is_none() {
        let surrogate = client
            .surrogate
            .clone()
            .ok_or_else(|| invalid("surrogate", "Meta client without a surrogate"))?;
        let mut agent_rng = RngStream::derive(cfg.seed, &[purpose::AGENT, client.client_id as u64]);
        let agent = SacAgent::new(cfg.meta.bins, SacConfig::default(), &mut agent_rng)?;
        let mcfg = MetaTrainConfig {
            n_random: cfg.meta.n_random,
            n_update: cfg.meta.n_update,
            bins: cfg.meta.bins,
            sigma: cfg.meta.sigma,
            batch_size: cfg.b,
            surrogate_lr: cfg.meta.surrogate_lr,
        };
        let mut ms = MetaSampler::new(agent, surrogate, mcfg)?;
        ms.meta_train(ds, &train, &val, &mut agent_rng)?;
        *slot = Some(Box::new(ms));
    }
    let ms = slot.as_mut().expect("just trained");
    let mut local = global.clone();
    for e in 0..cfg.e_local {
        let done = e + 1 == cfg.e_local;
        let (_, batches, _) = ms.env_step(ds, &train, &val, None, done, steps, rng)?;
        local.sgd_on_indices(&ds.xs, &ds.ys, &batches, cfg.eta)?;
        ms.maybe_update(rng)?;
    }
    local.params.sub(&global.params)
}

/// Result of a full simulation.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub records: Vec<RoundRecord>,
    pub model: Model,
}

fn model_spec(cfg: &SimConfig, ds: &Dataset) -> Result<ModelSpec> {
    match cfg.arch {
        Arch::LR => ModelSpec::lr(ds.dim(), ds.num_classes),
        Arch::MLP => ModelSpec::mlp(ds.dim(), cfg.hidden_dim, ds.num_classes),
    }
}

fn train_surrogate(
    ds: &Dataset,
    shard: &[usize],
    cfg: &SimConfig,
    client_id: usize,
) -> Result<Model> {
    let mut rng = RngStream::derive(cfg.seed, &[purpose::SURROGATE, client_id as u64]);
    let spec = ModelSpec::mlp(ds.dim(), cfg.meta.surrogate_hidden, ds.num_classes)?;
    let mut m = Model::init(spec, &mut rng)?;
    run_epochs(
        &mut m,
        ds,
        cfg.meta.surrogate_lr,
        cfg.meta.surrogate_epochs,
        |_| sampling::uniform_batches(&mut rng, shard, cfg.b),
    )?;
    Ok(m)
}

/// Server-held clean rows, removed from the training pool before partitioning.
fn split_root(cfg: &SimConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    if cfg.agg.rule != AggRule::FLTrust {
        return (vec![], (0..n).collect());
    }
    let mut rng = RngStream::derive(cfg.seed, &[purpose::ROOT]);
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    let root_size = cfg.agg.root_size.min(n / 2);
    let mut root = all[..root_size].to_vec();
    let mut rest = all[root_size..].to_vec();
    root.sort_unstable();
    rest.sort_unstable();
    (root, rest)
}

fn partition(cfg: &SimConfig, ds: &Dataset, pool: &[usize]) -> Result<Partition> {
    let mut rng = RngStream::derive(cfg.seed, &[purpose::PARTITION]);
    let sub = ds.subset(pool, "pool")?;
    let p = match cfg.partition {
        PartitionKind::Iid => partition_iid(&mut rng, sub.len(), cfg.k)?,
        PartitionKind::TwoClass => partition_two_class(&mut rng, &sub, cfg.k)?,
        PartitionKind::Dirichlet => {
            partition_dirichlet(&mut rng, &sub, cfg.k, cfg.dirichlet_alpha)?
        }
    };
    Ok(Partition {
        client_indices: p
            .client_indices
            .into_iter()
            .map(|ix| ix.into_iter().map(|i| pool[i]).collect())
            .collect(),
    })
}

/// Builds clients and applies one-off data mutations (LFA, AA) to a private
/// copy of the training set.
fn setup_clients(
    cfg: &SimConfig,
    train: &Dataset,
    pool: &[usize],
) -> Result<(Vec<ClientRuntime>, Dataset)> {
    let part = partition(cfg, train, pool)?;
    let n_bad = cfg.num_compromised();
    let mut data = train.clone();
    let mut clients = Vec::with_capacity(cfg.k);
    for (id, shard) in part.client_indices.into_iter().enumerate() {
        let mut c = ClientRuntime::honest(id, shard);
        if id < n_bad {
            c.compromised = true;
            let kind = cfg.attack.kind;
            if kind == AttackKind::Meta {
                c.val = split_validation(&c.shard).1;
            }
            if matches!(
                kind,
                AttackKind::TopK | AttackKind::Meta | AttackKind::LossOrder | AttackKind::AA
            ) && !c.shard.is_empty()
            {
                let train_rows = &c.shard[..c.shard.len() - c.val.len()];
                c.surrogate = Some(train_surrogate(&data, train_rows, cfg, id)?);
            }
            c.sampler = match kind {
                AttackKind::TopK => SamplerState::TopK(None),
                AttackKind::Meta => SamplerState::Meta(None),
                AttackKind::LossOrder => SamplerState::LossOrder,
                _ => SamplerState::Honest,
            };
            match kind {
                AttackKind::LFA => {
                    let ys: Vec<usize> = c.shard.iter().map(|&i| data.ys[i]).collect();
                    let flipped =
                        flip_labels(&ys, cfg.attack.source_class, cfg.attack.target_class);
                    if flipped.iter().any(|&y| y >= data.num_classes) {
                        return Err(invalid("target_class", "outside the label range"));
                    }
                    for (&i, y) in c.shard.iter().zip(flipped) {
                        data.ys[i] = y;
                    }
                }
                AttackKind::AA => {
                    let surrogate = c.surrogate.as_ref().expect("trained above");
                    let adv =
                        fgsm_poison(surrogate, &data.xs, &data.ys, &c.shard, cfg.attack.fgsm_eps)?;
                    for (r, &i) in c.shard.iter().enumerate() {
                        data.xs.row_mut(i).copy_from_slice(adv.row(r));
                    }
                }
                _ => {}
            }
        }
        clients.push(c);
    }
    Ok((clients, data))
}

fn agg_config(cfg: &SimConfig, n: usize, root_update: Option<Vec64>) -> AggConfig {
    let byz = cfg.default_byzantine(n);
    // keep the rule well-defined when few updates survive filtering
    let max_trim = n.saturating_sub(1) / 2;
    let max_f = n.saturating_sub(3);
    AggConfig {
        rule: cfg.agg.rule,
        trim_beta: cfg.agg.trim_beta.unwrap_or(byz).min(max_trim),
        krum_f: cfg.agg.krum_f.unwrap_or(byz).min(max_f),
        root_update,
    }
}

pub fn run_simulation(cfg: &SimConfig, train: &Dataset, test: &Dataset) -> Result<SimOutcome> {
    run_simulation_with(cfg, train, test, |_| {})
}

/// Runs all rounds, calling `on_round` after each one.
pub fn run_simulation_with(
    cfg: &SimConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<SimOutcome> {
    cfg.validate()?;
    if train.dim() != test.dim() || train.num_classes != test.num_classes {
        return Err(invalid("test", "train and test sets disagree on shape"));
    }
    let (root, pool) = split_root(cfg, train.len());
    let (mut clients, data) = setup_clients(cfg, train, &pool)?;
    let spec = model_spec(cfg, train)?;
    let mut global = Model::init(spec, &mut RngStream::derive(cfg.seed, &[purpose::INIT]))?;

    let mut eval_rng = RngStream::derive(cfg.seed, &[purpose::EVAL]);
    let mut eval_idx: Vec<usize> = (0..train.len()).collect();
    if cfg.train_eval_size < eval_idx.len() {
        eval_rng.shuffle(&mut eval_idx);
        eval_idx.truncate(cfg.train_eval_size);
        eval_idx.sort_unstable();
    }
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let pca_coords = (spec.arch == Arch::MLP).then(|| spec.last_layer_range());

    let mut history = UpdateHistory::new();
    let mut records = Vec::with_capacity(cfg.t);
    for round in 0..cfg.t {
        let started = Instant::now();
        let mut sel_rng = RngStream::derive(cfg.seed, &[purpose::SELECT, round as u64]);
        let selected = select_clients(&mut sel_rng, cfg.k, cfg.q)?;
        let mut updates = Vec::with_capacity(selected.len());
        for &id in &selected {
            if clients[id].shard.is_empty() {
                continue;
            }
            let mut rng = RngStream::derive(cfg.seed, &[purpose::LOCAL, round as u64, id as u64]);
            if clients[id].compromised && cfg.attack.kind == AttackKind::GA {
                rng = RngStream::derive(cfg.seed, &[purpose::ATTACK, round as u64, id as u64]);
            }
            updates.push(local_round(
                &mut clients[id],
                &global,
                &data,
                cfg,
                &mut rng,
            )?);
        }

        let mut flagged = vec![];
        match cfg.defense {
            Some(DefenseKind::PCA) if updates.len() >= 3 => {
                let out = pca_filter(&updates, cfg.threshold_z, pca_coords.clone())?;
                flagged = out.flagged;
                updates = out.kept;
            }
            Some(DefenseKind::FoolsGold) => {
                for u in &updates {
                    history.record(u)?;
                }
                let ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
                let w = foolsgold_weights(&history, &ids)?;
                updates = apply_weights(&updates, &w)?;
            }
            _ => {}
        }

        if !updates.is_empty() {
            let root_update = if cfg.agg.rule == AggRule::FLTrust {
                let mut rng = RngStream::derive(cfg.seed, &[purpose::ROOT, round as u64 + 1]);
                Some(honest_delta(&global, train, &root, cfg, &mut rng)?)
            } else {
                None
            };
            let acfg = agg_config(cfg, updates.len(), root_update);
            let delta = match aggregate(&updates, &acfg) {
                Ok((d, _)) => d,
                Err(Error::ZeroNorm(_)) => Vec64::zeros(global.params.len()),
                Err(e) => return Err(e),
            };
            global.params.axpy(1.0, &delta)?;
        }
        if !global.params.is_finite() {
            return Err(Error::NonFinite(format!(
                "global model diverged in round {}",
                round + 1
            )));
        }

        let rec = RoundRecord {
            round: round + 1,
            train_acc: global.accuracy(&train.xs, &train.ys, &eval_idx),
            test_acc: global.accuracy(&test.xs, &test.ys, &test_idx),
            selected,
            flagged,
            agg: cfg.agg.rule,
            attack: cfg.attack.kind,
            seed: cfg.seed,
            wallclock_secs: started.elapsed().as_secs_f64(),
        };
        on_round(&rec);
        records.push(rec);
    }
    Ok(SimOutcome {
        records,
        model: global,
    })
}

/// Max baseline test accuracy minus max attacked test accuracy, in points.
pub fn attack_impact(baseline: &[RoundRecord], attacked: &[RoundRecord]) -> Result<f64> {
    let best = |r: &[RoundRecord]| {
        r.iter()
            .map(|x| x.test_acc)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if baseline.is_empty() || attacked.is_empty() {
        return Err(invalid("records", "both runs need at least one round"));
    }
    Ok(100.0 * (best(baseline) - best(attacked)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_blobs;

    fn blobs(seed: u64, n: usize) -> Dataset {
        synth_blobs(&mut RngStream::new(seed, 0), n, 8, 3, 0.05).unwrap()
    }

    fn rec(acc: f64) -> RoundRecord {
        RoundRecord {
            round: 1,
            train_acc: acc,
            test_acc: acc,
            selected: vec![],
            flagged: vec![],
            agg: AggRule::FedAvg,
            attack: AttackKind::None,
            seed: 0,
            wallclock_secs: 0.0,
        }
    }

    #[test]
    fn selection_examples() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            select_clients(&mut rng, 7, 1.0).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        let ids = select_clients(&mut rng, 100, 0.1).unwrap();
        assert_eq!(ids.len(), 10);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let a = select_clients(&mut RngStream::derive(3, &[purpose::SELECT, 4]), 100, 0.1).unwrap();
        let b = select_clients(&mut RngStream::derive(3, &[purpose::SELECT, 4]), 100, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impact_examples() {
        assert_eq!(attack_impact(&[rec(0.5)], &[rec(0.5)]).unwrap(), 0.0);
        let d = attack_impact(&[rec(0.8508)], &[rec(0.7212)]).unwrap();
        assert!((d - 12.96).abs() < 1e-9);
        let d = attack_impact(&[rec(0.9), rec(0.7)], &[rec(0.85), rec(0.6)]).unwrap();
        assert!((d - 5.0).abs() < 1e-9);
        assert!(attack_impact(&[], &[rec(0.1)]).is_err());
    }

    #[test]
    fn full_batch_single_epoch_is_one_gradient_step() {
        let ds = blobs(1, 40);
        let global = Model::init(ModelSpec::lr(8, 3).unwrap(), &mut RngStream::new(1, 1)).unwrap();
        let shard: Vec<usize> = (0..40).collect();
        let cfg = SimConfig {
            e_local: 1,
            b: 40,
            eta: 0.1,
            ..SimConfig::default()
        };
        let mut c = ClientRuntime::honest(0, shard.clone());
        let u = local_round(&mut c, &global, &ds, &cfg, &mut RngStream::new(1, 2)).unwrap();
        let g = global.grad_indices(&ds.xs, &ds.ys, &shard).unwrap();
        for (d, gi) in u.delta.iter().zip(g.iter()) {
            assert!((d + 0.1 * gi).abs() < 1e-12);
        }
        let cfg0 = SimConfig { e_local: 0, ..cfg };
        let u0 = local_round(&mut c, &global, &ds, &cfg0, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(u0.delta.norm(), 0.0);
    }

    #[test]
    fn topk_client_takes_as_many_steps_as_honest() {
        let ds = blobs(2, 50);
        let shard: Vec<usize> = (0..50).collect();
        let cfg = SimConfig {
            e_local: 1,
            b: 8,
            attack: AttackConfig::of(AttackKind::TopK),
            ..SimConfig::default()
        };
        let surrogate = train_surrogate(&ds, &shard, &cfg, 0).unwrap();
        let pool = sampling::build_hard_pool(&surrogate, &ds, &shard, 2, 8).unwrap();
        let steps = sampling::batches_per_epoch(shard.len(), cfg.b);
        let topk = sampling::topk_batches(&mut RngStream::new(0, 0), &pool, steps, cfg.b).unwrap();
        let honest = sampling::uniform_batches(&mut RngStream::new(0, 0), &shard, cfg.b).unwrap();
        assert_eq!(topk.len(), honest.len());
        let mut c = ClientRuntime {
            compromised: true,
            surrogate: Some(surrogate),
            sampler: SamplerState::TopK(None),
            ..ClientRuntime::honest(0, shard)
        };
        let global = Model::init(ModelSpec::lr(8, 3).unwrap(), &mut RngStream::new(2, 1)).unwrap();
        let u = local_round(&mut c, &global, &ds, &cfg, &mut RngStream::new(2, 2)).unwrap();
        assert_eq!(u.n_samples, 50);
        assert!(matches!(c.sampler, SamplerState::TopK(Some(_))));
    }

    fn small_cfg() -> SimConfig {
        SimConfig {
            k: 10,
            q: 0.5,
            t: 50,
            e_local: 1,
            b: 16,
            eta: 0.05,
            ..SimConfig::default()
        }
    }

    #[test]
    fn separable_blobs_learned_and_deterministic() {
        let train = blobs(3, 600);
        let test = blobs(3, 1200)
            .subset(&(600..1200).collect::<Vec<_>>(), "test")
            .unwrap();
        let cfg = small_cfg();
        let a = run_simulation(&cfg, &train, &test).unwrap();
        let best = a.records.iter().map(|r| r.test_acc).fold(0.0, f64::max);
        assert!(best >= 0.95, "best test acc {best}");
        let b = run_simulation(&cfg, &train, &test).unwrap();
        let strip = |r: &[RoundRecord]| {
            r.iter()
                .map(|x| RoundRecord {
                    wallclock_secs: 0.0,
                    ..x.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.records), strip(&b.records));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn every_attack_and_rule_runs() {
        let train = blobs(4, 400);
        let test = blobs(5, 200);
        for kind in [
            AttackKind::LFA,
            AttackKind::GA,
            AttackKind::ZA,
            AttackKind::AA,
            AttackKind::TopK,
            AttackKind::Meta,
            AttackKind::LossOrder,
        ] {
            for rule in [
                AggRule::FedAvg,
                AggRule::TrimmedMean,
                AggRule::Krum,
                AggRule::FLTrust,
            ] {
                let cfg = SimConfig {
                    t: 2,
                    m: 0.2,
                    q: 1.0,
                    attack: AttackConfig::of(kind),
                    agg: AggSettings {
                        rule,
                        root_size: 40,
                        ..AggSettings::default()
                    },
                    meta: MetaSettings {
                        n_random: 4,
                        n_update: 4,
                        ..MetaSettings::default()
                    },
                    ..small_cfg()
                };
                let out = run_simulation(&cfg, &train, &test).unwrap();
                assert_eq!(out.records.len(), 2);
                assert!(out.model.params.is_finite());
            }
        }
        for defense in [DefenseKind::PCA, DefenseKind::FoolsGold] {
            let cfg = SimConfig {
                t: 3,
                defense: Some(defense),
                attack: AttackConfig::of(AttackKind::GA),
                m: 0.2,
                ..small_cfg()
            };
            run_simulation(&cfg, &train, &test).unwrap();
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = SimConfig {
            q: 1.5,
            ..SimConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("q"));
        let bad = SimConfig {
            m: 0.7,
            ..SimConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains('M'));
        assert_eq!(SimConfig::default().num_selected(), 10);
        let attacked = SimConfig {
            attack: AttackConfig::of(AttackKind::TopK),
            ..SimConfig::default()
        };
        assert_eq!(attacked.num_compromised(), 10);
    }
}
