//! Soft actor-critic meta-sampler.
//!
//! The agent observes a [`MetaState`] (train/validation error histograms of
//! the attacker's surrogate) and emits an action in `[0, 1]` that becomes the
//! centre `mu` of the Gaussian sampling bump. The reward is the change in the
//! surrogate's summed validation loss after one epoch on the sampled batches.
//!
//! Actions are squashed as `a = (tanh(u) + 1) / 2` with `u ~ N(mean, std)`.
//! Networks are trained with Adam.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{invalid, Error, Result};
use crate::models::{Model, ModelSpec};
use crate::numkit::{RngStream, Vec64};
use crate::sampling::{self, build_meta_state, GaussianSamplerParams, MetaState};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub alpha_ent: f64,
    pub lr: f64,
    pub capacity: usize,
    pub batch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.99,
            tau: 0.005,
            alpha_ent: 0.1,
            lr: 3e-4,
            capacity: 10_000,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: MetaState,
    pub a: f64,
    pub r: f64,
    pub s_next: MetaState,
    pub done: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    pushed: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("capacity", "must be >= 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            cursor: 0,
            pushed: 0,
        })
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !(0.0..=1.0).contains(&t.a) {
            return Err(invalid("a", format!("action {} outside [0, 1]", t.a)));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.pushed += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total pushes over the buffer's lifetime.
    pub fn total_pushed(&self) -> usize {
        self.pushed
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample with replacement; refuses to sample before `n` transitions exist.
    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Result<Vec<&Transition>> {
        if self.items.len() < n || n == 0 {
            return Err(Error::Underfilled {
                have: self.items.len(),
                need: n.max(1),
            });
        }
        Ok((0..n)
            .map(|_| &self.items[rng.below(self.items.len())])
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub actor: Model,
    pub critic1: Model,
    pub critic2: Model,
    pub target1: Model,
    pub target2: Model,
    pub cfg: SacConfig,
    opt_actor: Adam,
    opt_c1: Adam,
    opt_c2: Adam,
}

/// Losses from one [`SacAgent::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
}

struct Policy {
    mean: f64,
    log_std: f64,
    clamped: bool,
}

fn squash(u: f64) -> f64 {
    0.5 * (u.tanh() + 1.0)
}

impl SacAgent {
    /// Fresh agent for meta-states with `bins` bins per histogram.
    pub fn new(bins: usize, cfg: SacConfig, rng: &mut RngStream) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("b", "must be >= 1"));
        }
        let state_dim = 2 * bins;
        let actor = Model::init(ModelSpec::mlp_head(state_dim, cfg.hidden, 2)?, rng)?;
        let critic_spec = ModelSpec::mlp_head(state_dim + 1, cfg.hidden, 1)?;
        let critic1 = Model::init(critic_spec, rng)?;
        let critic2 = Model::init(critic_spec, rng)?;
        Ok(Self {
            opt_actor: Adam::new(actor.params.len()),
            opt_c1: Adam::new(critic1.params.len()),
            opt_c2: Adam::new(critic2.params.len()),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            cfg,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.spec.input_dim
    }

    fn policy(&self, s: &[f64]) -> Result<Policy> {
        let out = self.actor.outputs(s)?;
        let raw = out[1];
        let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
        Ok(Policy {
            mean: out[0],
            log_std,
            clamped: raw != log_std,
        })
    }

    fn state_vec(&self, s: &MetaState) -> Result<Vec<f64>> {
        let v = s.to_vec();
        if v.len() != self.state_dim() {
            return Err(Error::LengthMismatch {
                expected: self.state_dim(),
                got: v.len(),
            });
        }
        Ok(v)
    }

    /// Sampled (or mean, when `deterministic`) action in `[0, 1]`.
    pub fn act(&self, s: &MetaState, rng: &mut RngStream, deterministic: bool) -> Result<f64> {
        let p = self.policy(&self.state_vec(s)?)?;
        let u = if deterministic {
            p.mean
        } else {
            p.mean + p.log_std.exp() * rng.next_normal()
        };
        Ok(squash(u))
    }

    /// Reparameterized action and its log-density.
    fn sample_action(&self, s: &[f64], eps: f64) -> Result<(f64, f64)> {
        let p = self.policy(s)?;
        let u = p.mean + p.log_std.exp() * eps;
        let t = u.tanh();
        let log_prob =
            -0.5 * eps * eps - p.log_std - 0.5 * LN_2PI - (0.5 * (1.0 - t * t) + SQUASH_EPS).ln();
        Ok((0.5 * (t + 1.0), log_prob))
    }

    fn q(critic: &Model, s: &[f64], a: f64) -> Result<f64> {
        let mut x = s.to_vec();
        x.push(a);
        Ok(critic.outputs(&x)?[0])
    }

    /// Mean of the two online critics.
    pub fn q_value(&self, s: &MetaState, a: f64) -> Result<f64> {
        let v = self.state_vec(s)?;
        Ok(0.5 * (Self::q(&self.critic1, &v, a)? + Self::q(&self.critic2, &v, a)?))
    }

    /// One critic step per critic, one actor step, then Polyak-average the targets.
    pub fn update(&mut self, buffer: &ReplayBuffer, rng: &mut RngStream) -> Result<SacLosses> {
        let batch = buffer.sample(rng, self.cfg.batch_size)?;
        let n = batch.len() as f64;
        let SacConfig {
            gamma,
            alpha_ent,
            lr,
            tau,
            ..
        } = self.cfg;

        let mut states = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for t in &batch {
            let s = self.state_vec(&t.s)?;
            let s2 = self.state_vec(&t.s_next)?;
            let (a2, logp2) = self.sample_action(&s2, rng.next_normal())?;
            let q_next = Self::q(&self.target1, &s2, a2)?.min(Self::q(&self.target2, &s2, a2)?);
            let not_done = if t.done { 0.0 } else { 1.0 };
            targets.push(t.r + gamma * not_done * (q_next - alpha_ent * logp2));
            states.push(s);
        }

        let mut losses = [0.0; 2];
        for (which, loss) in losses.iter_mut().enumerate() {
            let critic = if which == 0 {
                &self.critic1
            } else {
                &self.critic2
            };
            let mut grad = vec![0.0; critic.params.len()];
            for ((t, s), y) in batch.iter().zip(&states).zip(&targets) {
                let mut x = s.clone();
                x.push(t.a);
                let q = critic.outputs(&x)?[0];
                let diff = q - y;
                *loss += diff * diff / n;
                critic.accumulate_vjp(&x, &[2.0 * diff / n], 1.0, &mut grad, false)?;
            }
            if which == 0 {
                self.opt_c1.step(&mut self.critic1.params, &grad, lr);
            } else {
                self.opt_c2.step(&mut self.critic2.params, &grad, lr);
            }
        }

        let mut actor_grad = vec![0.0; self.actor.params.len()];
        let mut actor_loss = 0.0;
        for s in &states {
            let p = self.policy(s)?;
            let eps = rng.next_normal();
            let std = p.log_std.exp();
            let u = p.mean + std * eps;
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            let a = 0.5 * (t + 1.0);
            let mut x = s.clone();
            x.push(a);
            let q1 = self.critic1.outputs(&x)?[0];
            let q2 = self.critic2.outputs(&x)?[0];
            let critic = if q1 <= q2 {
                &self.critic1
            } else {
                &self.critic2
            };
            let mut sink = vec![0.0; critic.params.len()];
            let dq_dx = critic
                .accumulate_vjp(&x, &[1.0], 1.0, &mut sink, true)?
                .expect("input gradient");
            let dq_da = dq_dx[dq_dx.len() - 1];
            let log_prob =
                -0.5 * eps * eps - p.log_std - 0.5 * LN_2PI - (0.5 * sech2 + SQUASH_EPS).ln();
            actor_loss += (alpha_ent * log_prob - q1.min(q2)) / n;
            // d(loss)/du through the squashing correction and the critic
            let dlogp_du = t * sech2 / (0.5 * sech2 + SQUASH_EPS);
            let dl_du = alpha_ent * dlogp_du - dq_da * 0.5 * sech2;
            let d_mean = dl_du;
            let d_log_std = if p.clamped {
                0.0
            } else {
                -alpha_ent + dl_du * std * eps
            };
            self.actor.accumulate_vjp(
                s,
                &[d_mean / n, d_log_std / n],
                1.0,
                &mut actor_grad,
                false,
            )?;
        }
        self.opt_actor.step(&mut self.actor.params, &actor_grad, lr);

        polyak(&mut self.target1.params, &self.critic1.params, tau);
        polyak(&mut self.target2.params, &self.critic2.params, tau);

        let all_finite = [&self.actor, &self.critic1, &self.critic2]
            .iter()
            .all(|m| m.params.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("SAC parameters".into()));
        }
        Ok(SacLosses {
            critic1: losses[0],
            critic2: losses[1],
            actor: actor_loss,
        })
    }

    /// Agent checkpoint: `FSPA`, version, hyperparameters, the five network
    /// names with byte lengths, then the network checkpoints back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nets = self.networks();
        let blobs: Vec<Vec<u8>> = nets.iter().map(|(_, m)| m.to_bytes()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(AGENT_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        for v in [
            self.cfg.gamma,
            self.cfg.tau,
            self.cfg.alpha_ent,
            self.cfg.lr,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.cfg.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.cfg.batch_size as u64).to_le_bytes());
        out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
        for ((name, _), blob) in nets.iter().zip(&blobs) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        }
        for blob in blobs {
            out.extend(blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("agent: {m}"));
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated"))?;
            at += n;
            Ok(s)
        };
        if take(4)? != AGENT_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != 1 {
            return Err(bad("unsupported version"));
        }
        let mut f = [0.0; 4];
        for v in &mut f {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let capacity = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let batch_size = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count != 5 {
            return Err(bad("expected five networks"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = take(1)?[0] as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name"))?;
            let size = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            entries.push((name, size));
        }
        let mut nets = Vec::with_capacity(count);
        for (name, size) in entries {
            nets.push((name, Model::from_bytes(take(size)?)?));
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut get = |want: &str| -> Result<Model> {
            let pos = nets
                .iter()
                .position(|(n, _)| n == want)
                .ok_or_else(|| bad(&format!("missing network {want}")))?;
            Ok(nets.swap_remove(pos).1)
        };
        let actor = get("actor")?;
        let critic1 = get("critic1")?;
        let critic2 = get("critic2")?;
        let target1 = get("target1")?;
        let target2 = get("target2")?;
        let cfg = SacConfig {
            hidden: actor.spec.hidden_dim,
            gamma: f[0],
            tau: f[1],
            alpha_ent: f[2],
            lr: f[3],
            capacity,
            batch_size,
        };
        Ok(Self {
            opt_actor: Adam::new(actor.params.len()),
            opt_c1: Adam::new(critic1.params.len()),
            opt_c2: Adam::new(critic2.params.len()),
            actor,
            critic1,
            critic2,
            target1,
            target2,
            cfg,
        })
    }

    fn networks(&self) -> [(&'static str, &Model); 5] {
        [
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("target1", &self.target1),
            ("target2", &self.target2),
        ]
    }
}

pub const AGENT_MAGIC: &[u8; 4] = b"FSPA";

fn polyak(target: &mut Vec64, online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}

/// `sum loss_after - sum loss_before` over the validation rows.
pub fn reward(before: &Model, after: &Model, ds: &Dataset, val_idx: &[usize]) -> Result<f64> {
    if before.spec != after.spec {
        return Err(invalid("surrogate", "before/after models differ in spec"));
    }
    if val_idx.is_empty() {
        return Err(invalid("val", "empty validation set"));
    }
    let sum = |m: &Model| m.sample_losses(&ds.xs, &ds.ys, val_idx).iter().sum::<f64>();
    Ok(sum(after) - sum(before))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub n_random: usize,
    pub n_update: usize,
    pub bins: usize,
    pub sigma: f64,
    /// Mini-batch size of the surrogate epochs.
    pub batch_size: usize,
    pub surrogate_lr: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            n_random: 32,
            n_update: 128,
            bins: sampling::DEFAULT_BINS,
            sigma: sampling::DEFAULT_SIGMA,
            batch_size: 32,
            surrogate_lr: 0.05,
        }
    }
}

/// What a meta-training run produced.
#[derive(Debug, Clone)]
pub struct MetaTrainReport {
    /// Surrogate validation loss (mean) after every step.
    pub val_loss: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

/// Persistent attacker-side state: agent, replay buffer and surrogate.
#[derive(Debug, Clone)]
pub struct MetaSampler {
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    pub surrogate: Model,
    pub cfg: MetaTrainConfig,
}

impl MetaSampler {
    pub fn new(agent: SacAgent, surrogate: Model, cfg: MetaTrainConfig) -> Result<Self> {
        Ok(Self {
            buffer: ReplayBuffer::new(agent.cfg.capacity)?,
            agent,
            surrogate,
            cfg,
        })
    }

    /// One environment step: observe, act, sample a Gaussian-weighted epoch,
    /// train the surrogate on it, score the reward and store the transition.
    ///
    /// Returns the chosen `mu` and the sampled batches so the caller can
    /// reuse them for its own model.
    #[allow(clippy::too_many_arguments)]
    pub fn env_step(
        &mut self,
        ds: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        action: Option<f64>,
        done: bool,
        n_batches: usize,
        rng: &mut RngStream,
    ) -> Result<(f64, sampling::IndexBatches, f64)> {
        let cfg = self.cfg;
        let s = build_meta_state(&self.surrogate, ds, train_idx, val_idx, cfg.bins)?;
        let a = match action {
            Some(a) => a,
            None => self.agent.act(&s, rng, false)?,
        };
        let errors = self.surrogate.sample_errors(&ds.xs, &ds.ys, train_idx);
        let batches = sampling::weighted_batches(
            rng,
            train_idx,
            &errors,
            GaussianSamplerParams::new(a, cfg.sigma)?,
            n_batches,
            cfg.batch_size,
        )?;
        let mut after = self.surrogate.clone();
        after.sgd_on_indices(&ds.xs, &ds.ys, &batches, cfg.surrogate_lr)?;
        let r = reward(&self.surrogate, &after, ds, val_idx)?;
        let s_next = build_meta_state(&after, ds, train_idx, val_idx, cfg.bins)?;
        self.buffer.push(Transition {
            s,
            a,
            r,
            s_next,
            done,
        })?;
        self.surrogate = after;
        Ok((a, batches, r))
    }

    /// SAC update when the buffer holds a full batch; otherwise a no-op.
    pub fn maybe_update(&mut self, rng: &mut RngStream) -> Result<Option<SacLosses>> {
        if self.buffer.len() < self.agent.cfg.batch_size {
            return Ok(None);
        }
        self.agent.update(&self.buffer, rng).map(Some)
    }

    /// `n_random` warm-up steps with uniform actions, then `n_update` policy
    /// steps each followed by a SAC update.
    pub fn meta_train(
        &mut self,
        ds: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        rng: &mut RngStream,
    ) -> Result<MetaTrainReport> {
        let MetaTrainConfig {
            n_random, n_update, ..
        } = self.cfg;
        if n_random == 0 || n_update == 0 {
            return Err(invalid("n_random/n_update", "both must be >= 1"));
        }
        let total = n_random + n_update;
        let n_batches = sampling::batches_per_epoch(train_idx.len(), self.cfg.batch_size);
        let mut report = MetaTrainReport {
            val_loss: Vec::with_capacity(total),
            actions: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
        };
        for step in 0..total {
            let warm = step < n_random;
            let action = warm.then(|| rng.next_f64());
            let (a, _, r) = self.env_step(
                ds,
                train_idx,
                val_idx,
                action,
                step + 1 == total,
                n_batches,
                rng,
            )?;
            if !warm {
                self.maybe_update(rng)?;
            }
            let vl = self.surrogate.sample_losses(&ds.xs, &ds.ys, val_idx);
            report
                .val_loss
                .push(vl.iter().sum::<f64>() / vl.len() as f64);
            report.actions.push(a);
            report.rewards.push(r);
        }
        Ok(report)
    }
}

/// Free-function form of [`MetaSampler::meta_train`].
pub fn meta_train(
    agent: SacAgent,
    surrogate: Model,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: MetaTrainConfig,
    rng: &mut RngStream,
) -> Result<(MetaSampler, MetaTrainReport)> {
    let mut ms = MetaSampler::new(agent, surrogate, cfg)?;
    let report = ms.meta_train(ds, train_idx, val_idx, rng)?;
    Ok((ms, report))
}
