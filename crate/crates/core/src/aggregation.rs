//! Server-side aggregation rules over client deltas.
//!
//! Every rule orders its input by `client_id` first, so results do not
//! depend on the order updates arrive in.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkit::{cosine, l2_dist_sq, ParamVector, Vec64};

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub client_id: usize,
    pub delta: ParamVector,
    pub n_samples: usize,
}

impl Update {
    pub fn new(client_id: usize, delta: ParamVector, n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(invalid("n_samples", "must be >= 1"));
        }
        if !delta.is_finite() {
            return Err(Error::NonFinite(format!("delta of client {client_id}")));
        }
        Ok(Self {
            client_id,
            delta,
            n_samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggRule {
    FedAvg,
    TrimmedMean,
    Krum,
    FLTrust,
}

impl AggRule {
    pub fn name(self) -> &'static str {
        match self {
            AggRule::FedAvg => "FedAvg",
            AggRule::TrimmedMean => "TrimmedMean",
            AggRule::Krum => "Krum",
            AggRule::FLTrust => "FLTrust",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggConfig {
    pub rule: AggRule,
    pub trim_beta: usize,
    pub krum_f: usize,
    pub root_update: Option<ParamVector>,
}

impl AggConfig {
    pub fn fedavg() -> Self {
        Self {
            rule: AggRule::FedAvg,
            trim_beta: 0,
            krum_f: 0,
            root_update: None,
        }
    }
}

fn sorted(updates: &[Update]) -> Result<Vec<&Update>> {
    let first = updates.first().ok_or(Error::TooFewUpdates {
        rule: "aggregation",
        needed: 1,
        got: 0,
    })?;
    let dim = first.delta.len();
    if let Some(u) = updates.iter().find(|u| u.delta.len() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            got: u.delta.len(),
        });
    }
    let mut v: Vec<&Update> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    Ok(v)
}

/// Sample-count weighted mean of the deltas.
pub fn fedavg(updates: &[Update]) -> Result<ParamVector> {
    let ups = sorted(updates)?;
    let total: usize = ups.iter().map(|u| u.n_samples).sum();
    let mut out = Vec64::zeros(ups[0].delta.len());
    for u in ups {
        out.axpy(u.n_samples as f64 / total as f64, &u.delta)?;
    }
    Ok(out)
}

/// Coordinate-wise mean after dropping the `beta` smallest and largest values.
pub fn trimmed_mean(updates: &[Update], beta: usize) -> Result<ParamVector> {
    let ups = sorted(updates)?;
    let n = ups.len();
    if n <= 2 * beta {
        return Err(Error::TooFewUpdates {
            rule: "trimmed_mean",
            needed: 2 * beta + 1,
            got: n,
        });
    }
    let dim = ups[0].delta.len();
    let kept = (n - 2 * beta) as f64;
    let mut col = vec![0.0; n];
    let mut out = Vec64::zeros(dim);
    for d in 0..dim {
        for (c, u) in col.iter_mut().zip(&ups) {
            *c = u.delta[d];
        }
        col.sort_by(f64::total_cmp);
        out[d] = col[beta..n - beta].iter().sum::<f64>() / kept;
    }
    Ok(out)
}

/// Krum scores in ascending `client_id` order.
pub fn krum_scores(updates: &[Update], f: usize) -> Result<Vec<(usize, f64)>> {
    let ups = sorted(updates)?;
    let n = ups.len();
    if n < f + 3 {
        return Err(Error::TooFewUpdates {
            rule: "krum",
            needed: f + 3,
            got: n,
        });
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = l2_dist_sq(&ups[i].delta, &ups[j].delta)?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let m = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist[i * n + j])
                .collect();
            row.sort_by(f64::total_cmp);
            (ups[i].client_id, row[..m].iter().sum())
        })
        .collect())
}

/// The single update with minimal Krum score; ties go to the lower client id.
pub fn krum(updates: &[Update], f: usize) -> Result<(ParamVector, usize)> {
    let scores = krum_scores(updates, f)?;
    let (id, _) = scores
        .iter()
        .copied()
        .fold(None::<(usize, f64)>, |best, (id, s)| match best {
            Some((_, bs)) if bs <= s => best,
            _ => Some((id, s)),
        })
        .expect("non-empty");
    let chosen = updates.iter().find(|u| u.client_id == id).expect("present");
    Ok((chosen.delta.clone(), id))
}

/// ReLU-cosine trust scores with every delta rescaled to the root norm.
pub fn fltrust_scores(updates: &[Update], root: &[f64]) -> Result<Vec<(usize, f64)>> {
    let ups = sorted(updates)?;
    if ups[0].delta.len() != root.len() {
        return Err(Error::LengthMismatch {
            expected: root.len(),
            got: ups[0].delta.len(),
        });
    }
    let root_norm = root.iter().map(|v| v * v).sum::<f64>().sqrt();
    if root_norm == 0.0 {
        return Err(Error::ZeroNorm("root update"));
    }
    ups.iter()
        .map(|u| {
            let ts = match cosine(&u.delta, root) {
                Ok(c) => c.max(0.0),
                Err(Error::ZeroNorm(_)) => 0.0,
                Err(e) => return Err(e),
            };
            Ok((u.client_id, ts))
        })
        .collect()
}

pub fn fltrust(updates: &[Update], root: &[f64]) -> Result<ParamVector> {
    let scores = fltrust_scores(updates, root)?;
    let ups = sorted(updates)?;
    let root_norm = root.iter().map(|v| v * v).sum::<f64>().sqrt();
    let total: f64 = scores.iter().map(|s| s.1).sum();
    let mut out = Vec64::zeros(root.len());
    if total == 0.0 {
        return Ok(out);
    }
    for (u, (_, ts)) in ups.iter().zip(&scores) {
        let norm = u.delta.norm();
        if *ts == 0.0 || norm == 0.0 {
            continue;
        }
        out.axpy(ts * root_norm / norm / total, &u.delta)?;
    }
    Ok(out)
}

/// Aggregated delta plus the Krum-selected client when applicable.
pub fn aggregate(updates: &[Update], cfg: &AggConfig) -> Result<(ParamVector, Option<usize>)> {
    match cfg.rule {
        AggRule::FedAvg => Ok((fedavg(updates)?, None)),
        AggRule::TrimmedMean => Ok((trimmed_mean(updates, cfg.trim_beta)?, None)),
        AggRule::Krum => krum(updates, cfg.krum_f).map(|(d, id)| (d, Some(id))),
        AggRule::FLTrust => {
            let root = cfg
                .root_update
                .as_ref()
                .ok_or_else(|| invalid("root_update", "FLTrust requires a root update"))?;
            Ok((fltrust(updates, root)?, None))
        }
    }
}
