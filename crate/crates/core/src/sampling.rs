//! Batch construction: honest shuffling, the hard-sample pool attack, the
//! Gaussian-weighted sampler driven by the meta-sampler, a loss-ordering
//! baseline, and the error-histogram meta-state.
//!
//! Samplers emit batches as lists of dataset indices; use [`materialize`] to
//! gather them into [`Batch`] values.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{invalid, Error, Result};
use crate::models::{Batch, Model};
use crate::numkit::RngStream;

/// Ordered mini-batches of dataset indices.
pub type IndexBatches = Vec<Vec<usize>>;

/// Default histogram resolution (meta-state of length 10).
pub const DEFAULT_BINS: usize = 5;
/// Default Gaussian width of the meta-sampler.
pub const DEFAULT_SIGMA: f64 = 0.2;

pub fn materialize(ds: &Dataset, batches: &[Vec<usize>]) -> Result<Vec<Batch>> {
    batches
        .iter()
        .map(|b| Batch::gather(&ds.xs, &ds.ys, b))
        .collect()
}

/// Number of SGD steps per local epoch, shared by every sampler.
pub fn batches_per_epoch(shard_len: usize, batch_size: usize) -> usize {
    shard_len.div_ceil(batch_size)
}

/// Random permutation chunked into `ceil(n / B)` batches.
pub fn uniform_batches(
    rng: &mut RngStream,
    indices: &[usize],
    batch_size: usize,
) -> Result<IndexBatches> {
    if indices.is_empty() {
        return Err(invalid("indices", "empty index set"));
    }
    if batch_size == 0 {
        return Err(invalid("B", "must be >= 1"));
    }
    let mut perm = indices.to_vec();
    rng.shuffle(&mut perm);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// The `kappa * B` hardest samples of a shard, hardest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HardPool {
    pub indices: Vec<usize>,
    pub errors: Vec<f64>,
}

/// Sort `(index, error)` pairs hardest first; equal errors keep the lower index first.
fn rank_desc(indices: &[usize], errors: &[f64]) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = indices
        .iter()
        .copied()
        .zip(errors.iter().copied())
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs
}

/// Top-`kappa * B` pool from precomputed difficulty scores.
pub fn hard_pool_from_errors(
    indices: &[usize],
    errors: &[f64],
    kappa: usize,
    batch_size: usize,
) -> Result<HardPool> {
    if indices.len() != errors.len() {
        return Err(Error::LengthMismatch {
            expected: indices.len(),
            got: errors.len(),
        });
    }
    let size = kappa
        .checked_mul(batch_size)
        .ok_or_else(|| invalid("kappa", "pool size overflow"))?;
    if size == 0 {
        return Err(invalid("kappa", "pool must hold at least one sample"));
    }
    if size > indices.len() {
        return Err(invalid(
            "kappa",
            format!("pool of {size} larger than shard of {}", indices.len()),
        ));
    }
    let ranked = rank_desc(indices, errors);
    let (indices, errors) = ranked.into_iter().take(size).unzip();
    Ok(HardPool { indices, errors })
}

/// Score the shard with the surrogate and keep the hardest `kappa * B` samples.
pub fn build_hard_pool(
    surrogate: &Model,
    ds: &Dataset,
    client_indices: &[usize],
    kappa: usize,
    batch_size: usize,
) -> Result<HardPool> {
    let errors = surrogate.sample_errors(&ds.xs, &ds.ys, client_indices);
    hard_pool_from_errors(client_indices, &errors, kappa, batch_size)
}

/// Batches drawn uniformly with replacement from the pool.
pub fn topk_batches(
    rng: &mut RngStream,
    pool: &HardPool,
    n_batches: usize,
    batch_size: usize,
) -> Result<IndexBatches> {
    if pool.indices.is_empty() {
        return Err(invalid("pool", "empty"));
    }
    Ok((0..n_batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| pool.indices[rng.below(pool.indices.len())])
                .collect()
        })
        .collect())
}

/// Fractions of `errors` in `b` equal-width bins over `[0, 1]`; the last bin is closed.
pub fn histogram_from_errors(errors: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(invalid("b", "must be >= 1"));
    }
    if errors.is_empty() {
        return Err(invalid("indices", "empty index set"));
    }
    let mut h = vec![0.0; bins];
    for &e in errors {
        let bin = ((e.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        h[bin] += 1.0;
    }
    let n = errors.len() as f64;
    for v in &mut h {
        *v /= n;
    }
    Ok(h)
}

pub fn error_histogram(
    surrogate: &Model,
    ds: &Dataset,
    indices: &[usize],
    bins: usize,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(invalid("indices", "empty index set"));
    }
    histogram_from_errors(&surrogate.sample_errors(&ds.xs, &ds.ys, indices), bins)
}

/// Train and validation error histograms, concatenated train first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub train_hist: Vec<f64>,
    pub val_hist: Vec<f64>,
}

impl MetaState {
    pub fn new(train_hist: Vec<f64>, val_hist: Vec<f64>) -> Result<Self> {
        if train_hist.len() != val_hist.len() || train_hist.is_empty() {
            return Err(invalid(
                "meta_state",
                "halves must be equal, non-empty lengths",
            ));
        }
        for h in [&train_hist, &val_hist] {
            let s: f64 = h.iter().sum();
            if h.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(invalid(
                    "meta_state",
                    "histogram must be non-negative and sum to 1",
                ));
            }
        }
        Ok(Self {
            train_hist,
            val_hist,
        })
    }

    pub fn bins(&self) -> usize {
        self.train_hist.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.train_hist.clone();
        v.extend_from_slice(&self.val_hist);
        v
    }
}

pub fn build_meta_state(
    surrogate: &Model,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    bins: usize,
) -> Result<MetaState> {
    MetaState::new(
        error_histogram(surrogate, ds, train_idx, bins)?,
        error_histogram(surrogate, ds, val_idx, bins)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSamplerParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianSamplerParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(invalid("mu", format!("{mu} outside [0, 1]")));
        }
        if !(sigma > 0.0) {
            return Err(invalid("sigma", "must be > 0"));
        }
        Ok(Self { mu, sigma })
    }
}

/// `w_i = g(err_i) / sum_j g(err_j)` for a Gaussian bump centred at `mu`.
///
/// Exponents are shifted by their maximum before exponentiating; the shift
/// cancels in the normalization and keeps the largest weight at least
/// `1 / n`, so narrow bumps never divide by zero. Far-away samples may
/// underflow to a weight of exactly zero.
pub fn gaussian_weights(errors: &[f64], p: GaussianSamplerParams) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(invalid("errors", "at least one sample required"));
    }
    if !(p.sigma > 0.0) {
        return Err(invalid("sigma", "must be > 0"));
    }
    let expo: Vec<f64> = errors
        .iter()
        .map(|&e| {
            let z = (e - p.mu) / p.sigma;
            -0.5 * z * z
        })
        .collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let g: Vec<f64> = expo.iter().map(|&x| (x - top).exp()).collect();
    let total: f64 = g.iter().sum();
    Ok(g.into_iter().map(|v| v / total).collect())
}

/// Draw `n_batches` batches with replacement from `indices` according to `weights`.
pub fn sample_weighted(
    rng: &mut RngStream,
    indices: &[usize],
    weights: &[f64],
    n_batches: usize,
    batch_size: usize,
) -> Result<IndexBatches> {
    if indices.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: indices.len(),
            got: weights.len(),
        });
    }
    if indices.is_empty() {
        return Err(invalid("indices", "empty index set"));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    Ok((0..n_batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| {
                    let u = rng.next_f64() * total;
                    let k = cdf.partition_point(|&c| c <= u).min(indices.len() - 1);
                    indices[k]
                })
                .collect()
        })
        .collect())
}

pub fn weighted_batches(
    rng: &mut RngStream,
    indices: &[usize],
    errors: &[f64],
    p: GaussianSamplerParams,
    n_batches: usize,
    batch_size: usize,
) -> Result<IndexBatches> {
    let w = gaussian_weights(errors, p)?;
    sample_weighted(rng, indices, &w, n_batches, batch_size)
}

/// Indices sorted by surrogate difficulty, chunked into batches, each used once.
pub fn loss_order_batches(
    surrogate: &Model,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    descending: bool,
) -> Result<IndexBatches> {
    if indices.is_empty() {
        return Err(invalid("indices", "empty index set"));
    }
    if batch_size == 0 {
        return Err(invalid("B", "must be >= 1"));
    }
    let errors = surrogate.sample_errors(&ds.xs, &ds.ys, indices);
    let mut ranked: Vec<usize> = rank_desc(indices, &errors)
        .into_iter()
        .map(|p| p.0)
        .collect();
    if !descending {
        ranked.reverse();
    }
    Ok(ranked.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::numkit::Mat64;

    #[test]
    fn uniform_covers_each_index_once() {
        let mut rng = RngStream::new(1, 0);
        let b = uniform_batches(&mut rng, &[3, 5, 7, 9], 2).unwrap();
        assert_eq!(b.len(), 2);
        let mut all = b.concat();
        all.sort();
        assert_eq!(all, vec![3, 5, 7, 9]);
        let again = uniform_batches(&mut RngStream::new(1, 0), &[3, 5, 7, 9], 2).unwrap();
        assert_eq!(b, again);
        assert!(uniform_batches(&mut rng, &[], 2).is_err());
        assert_eq!(
            uniform_batches(&mut rng, &[1, 2, 3, 4, 5], 2)
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn pool_from_hand_scores() {
        let p = hard_pool_from_errors(&[10, 11, 12, 13], &[0.9, 0.1, 0.5, 0.7], 1, 2).unwrap();
        assert_eq!(p.indices, vec![10, 13]);
        assert_eq!(p.errors, vec![0.9, 0.7]);
        let whole = hard_pool_from_errors(&[1, 2], &[0.2, 0.3], 1, 2).unwrap();
        assert_eq!(whole.indices, vec![2, 1]);
        assert!(hard_pool_from_errors(&[1, 2], &[0.2, 0.3], 2, 2).is_err());
    }

    #[test]
    fn pool_ties_prefer_lower_index() {
        let p = hard_pool_from_errors(&[9, 4, 7], &[0.5, 0.5, 0.5], 1, 2).unwrap();
        assert_eq!(p.indices, vec![4, 7]);
    }

    #[test]
    fn topk_batches_stay_in_pool() {
        let pool = HardPool {
            indices: vec![4, 8],
            errors: vec![0.9, 0.8],
        };
        let b = topk_batches(&mut RngStream::new(2, 0), &pool, 5, 2).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().flatten().all(|i| pool.indices.contains(i)));
        assert_eq!(
            b,
            topk_batches(&mut RngStream::new(2, 0), &pool, 5, 2).unwrap()
        );
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(
            histogram_from_errors(&[0.1, 0.6, 0.9, 0.2], 2).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            histogram_from_errors(&[0.0, 0.0], 3).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            histogram_from_errors(&[1.0], 4).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        assert!(histogram_from_errors(&[], 4).is_err());
    }

    #[test]
    fn meta_state_length_and_halves() {
        let ds = Dataset::new(
            Mat64::new(4, 2, vec![0.1, 0.2, 0.9, 0.8, 0.4, 0.4, 0.0, 1.0]).unwrap(),
            vec![0, 1, 0, 1],
            2,
            "toy",
        )
        .unwrap();
        let m = Model::init(ModelSpec::lr(2, 2).unwrap(), &mut RngStream::new(3, 0)).unwrap();
        let s = build_meta_state(&m, &ds, &[0, 1, 2, 3], &[0, 1, 2, 3], DEFAULT_BINS).unwrap();
        assert_eq!(s.to_vec().len(), 10);
        assert_eq!(s.train_hist, s.val_hist);
        assert!((s.train_hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_weight_examples() {
        let p = GaussianSamplerParams::new(0.5, DEFAULT_SIGMA).unwrap();
        let w = gaussian_weights(&[0.3; 4], p).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let w = gaussian_weights(&[0.1, 0.5, 0.9, 0.45], p).unwrap();
        assert_eq!(crate::models::argmax(&w), 1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(GaussianSamplerParams::new(1.5, 0.2).is_err());
        assert!(GaussianSamplerParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn narrow_bump_concentrates_on_one_sample() {
        let p = GaussianSamplerParams::new(1.0, 0.01).unwrap();
        let mut errors = vec![0.05; 20];
        errors[7] = 0.99;
        let idx: Vec<usize> = (100..120).collect();
        let b = weighted_batches(&mut RngStream::new(4, 0), &idx, &errors, p, 100, 100).unwrap();
        let hits = b.iter().flatten().filter(|&&i| i == 107).count();
        assert!(hits as f64 / 10_000.0 > 0.9);
    }

    #[test]
    fn loss_order_examples() {
        let ds = Dataset::new(
            Mat64::new(4, 1, vec![0.0, 0.3, 0.6, 1.0]).unwrap(),
            vec![0, 0, 1, 1],
            2,
            "toy",
        )
        .unwrap();
        let mut m = Model::zeros(ModelSpec::lr(1, 2).unwrap()).unwrap();
        m.params.0 = vec![-4.0, 4.0, 2.0, -2.0];
        let errs = m.sample_errors(&ds.xs, &ds.ys, &[0, 1, 2, 3]);
        let desc = loss_order_batches(&m, &ds, &[0, 1, 2, 3], 2, true).unwrap();
        let asc = loss_order_batches(&m, &ds, &[0, 1, 2, 3], 2, false).unwrap();
        let hardest: Vec<usize> = rank_desc(&[0, 1, 2, 3], &errs)
            .iter()
            .take(2)
            .map(|p| p.0)
            .collect();
        assert_eq!(desc[0], hardest);
        let mut all = desc.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let flipped: Vec<usize> = asc.concat().into_iter().rev().collect();
        assert_eq!(flipped, desc.concat());
    }
}
