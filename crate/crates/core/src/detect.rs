//! Defenses that filter or reweight updates before aggregation.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::aggregation::Update;
use crate::error::{invalid, Error, Result};
use crate::numkit::{cosine, dot_unchecked, median, ParamVector, RngStream, Vec64};

pub const DEFAULT_THRESHOLD_Z: f64 = 3.0;
const POWER_ITERS: usize = 100;
const POWER_TOL: f64 = 1e-9;
const POWER_START_SEED: u64 = 0x5043_4131;

/// Running sum of each client's deltas across rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateHistory {
    sums: BTreeMap<usize, ParamVector>,
}

impl UpdateHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, u: &Update) -> Result<()> {
        match self.sums.get_mut(&u.client_id) {
            Some(s) => s.axpy(1.0, &u.delta),
            None => {
                if let Some(other) = self.sums.values().next() {
                    if other.len() != u.delta.len() {
                        return Err(Error::LengthMismatch {
                            expected: other.len(),
                            got: u.delta.len(),
                        });
                    }
                }
                self.sums.insert(u.client_id, u.delta.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, client_id: usize) -> Option<&ParamVector> {
        self.sums.get(&client_id)
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.sums.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaOutcome {
    pub kept: Vec<Update>,
    pub flagged: Vec<usize>,
}

/// Leading eigenvector of `Xᵀ X` for centered rows `X`, via power iteration.
fn top_component(rows: &[Vec<f64>], seed_dir: &[f64]) -> Option<Vec<f64>> {
    let dim = seed_dir.len();
    let mut v = seed_dir.to_vec();
    let norm = dot_unchecked(&v, &v).sqrt();
    if norm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..POWER_ITERS {
        let mut next = vec![0.0; dim];
        for r in rows {
            let p = dot_unchecked(r, &v);
            for (n, x) in next.iter_mut().zip(r) {
                *n += p * x;
            }
        }
        let nn = dot_unchecked(&next, &next).sqrt();
        if nn == 0.0 {
            return None;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let change: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if change < POWER_TOL {
            break;
        }
    }
    Some(v)
}

/// Projects centered deltas on the top two principal components and flags
/// clients whose distance from the coordinate-wise median exceeds
/// `threshold_z` times the median of those distances. At most
/// `⌊n/2⌋` clients are flagged (the most extreme ones).
///
/// `coords` restricts the analysis to a slice of each delta (for example the
/// last layer of an MLP); `None` uses the whole vector.
pub fn pca_filter(
    updates: &[Update],
    threshold_z: f64,
    coords: Option<Range<usize>>,
) -> Result<PcaOutcome> {
    let n = updates.len();
    if n < 3 {
        return Err(Error::TooFewUpdates {
            rule: "pca_filter",
            needed: 3,
            got: n,
        });
    }
    if !(threshold_z > 0.0) {
        return Err(invalid("threshold_z", "must be > 0"));
    }
    let mut ups: Vec<&Update> = updates.iter().collect();
    ups.sort_by_key(|u| u.client_id);
    let full = ups[0].delta.len();
    let range = coords.unwrap_or(0..full);
    if range.end > full || ups.iter().any(|u| u.delta.len() != full) {
        return Err(invalid(
            "coords",
            "range exceeds delta length or lengths differ",
        ));
    }
    let dim = range.len();
    let mut mean = vec![0.0; dim];
    for u in &ups {
        for (m, x) in mean.iter_mut().zip(&u.delta[range.clone()]) {
            *m += x / n as f64;
        }
    }
    let mut rows: Vec<Vec<f64>> = ups
        .iter()
        .map(|u| {
            u.delta[range.clone()]
                .iter()
                .zip(&mean)
                .map(|(x, m)| x - m)
                .collect()
        })
        .collect();
    let keep_all = |ups: &[&Update]| PcaOutcome {
        kept: ups.iter().map(|u| (*u).clone()).collect(),
        flagged: vec![],
    };

    // fixed pseudo-random start vectors keep the result deterministic without
    // tying a degenerate eigenspace to any one client's row
    let mut start_rng = RngStream::new(POWER_START_SEED, 0);
    let mut start = |_: &[Vec<f64>]| start_rng.gaussian(dim, 0.0, 1.0).expect("unit variance");
    let Some(pc1) = top_component(&rows, &start(&rows)) else {
        return Ok(keep_all(&ups));
    };
    let proj1: Vec<f64> = rows.iter().map(|r| dot_unchecked(r, &pc1)).collect();
    for (r, p) in rows.iter_mut().zip(&proj1) {
        for (x, c) in r.iter_mut().zip(&pc1) {
            *x -= p * c;
        }
    }
    let proj2: Vec<f64> = match top_component(&rows, &start(&rows)) {
        Some(pc2) => rows.iter().map(|r| dot_unchecked(r, &pc2)).collect(),
        None => vec![0.0; n],
    };

    let m1 = median(&proj1);
    let m2 = median(&proj2);
    let dist: Vec<f64> = proj1
        .iter()
        .zip(&proj2)
        .map(|(a, b)| ((a - m1).powi(2) + (b - m2).powi(2)).sqrt())
        .collect();
    // absolute deviations from the median point are the distances themselves
    let mad = median(&dist);
    let scale = proj1
        .iter()
        .chain(&proj2)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(keep_all(&ups));
    }
    let tol = 1e-12 * scale;
    let mut over: Vec<(f64, usize)> = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > threshold_z * mad + tol)
        .map(|(i, &d)| (d, i))
        .collect();
    over.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    over.truncate(n / 2);
    let mut flagged_pos: Vec<usize> = over.into_iter().map(|(_, i)| i).collect();
    flagged_pos.sort_unstable();
    Ok(PcaOutcome {
        kept: ups
            .iter()
            .enumerate()
            .filter(|(i, _)| !flagged_pos.contains(i))
            .map(|(_, u)| (*u).clone())
            .collect(),
        flagged: flagged_pos.iter().map(|&i| ups[i].client_id).collect(),
    })
}

fn logit_scale(w: f64) -> f64 {
    if w <= 0.0 || w >= 1.0 {
        return w.clamp(0.0, 1.0);
    }
    ((w / (1.0 - w)).ln() / 2.0 + 0.5).clamp(0.0, 1.0)
}

/// FoolsGold weights for `clients`, in the order given.
///
/// Each client's weight is `1 - max_j cos(h_i, h_j)` clipped to `[0, 1]`,
/// then logit-scaled. Clients with no or zero-norm history get weight 1.
pub fn foolsgold_weights(history: &UpdateHistory, clients: &[usize]) -> Result<Vec<f64>> {
    let active: Vec<(usize, &ParamVector)> = clients
        .iter()
        .enumerate()
        .filter_map(|(pos, id)| {
            history
                .get(*id)
                .filter(|h| h.norm() > 0.0)
                .map(|h| (pos, h))
        })
        .collect();
    let mut weights = vec![1.0; clients.len()];
    if active.len() < 2 {
        return Ok(weights);
    }
    for (a, (pos, hi)) in active.iter().enumerate() {
        let mut max_sim = f64::NEG_INFINITY;
        for (b, (_, hj)) in active.iter().enumerate() {
            if a != b {
                max_sim = max_sim.max(cosine(hi, hj)?);
            }
        }
        weights[*pos] = logit_scale((1.0 - max_sim).clamp(0.0, 1.0));
    }
    Ok(weights)
}

/// Scales each delta by its weight.
pub fn apply_weights(updates: &[Update], weights: &[f64]) -> Result<Vec<Update>> {
    if updates.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: updates.len(),
            got: weights.len(),
        });
    }
    Ok(updates
        .iter()
        .zip(weights)
        .map(|(u, &w)| Update {
            delta: if w == 1.0 {
                u.delta.clone()
            } else {
                Vec64(u.delta.iter().map(|x| x * w).collect())
            },
            ..u.clone()
        })
        .collect())
}
