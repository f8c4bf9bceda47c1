//! Generalization diagnostics and empirical checks of the sample-order
//! theory: bias/variance, gradient and curvature distances, the expected
//! second-order correction under random orderings, the bad-batch error bound
//! and the η² scaling of order effects.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{invalid, Error, Result};
use crate::models::{hessian_diag_fd, Batch, Model, ModelSpec, FD_STEP};
use crate::numkit::{cosine, l2_norm_sq, Mat64, RngStream, Vec64};
use crate::sampling;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    pub bias: f64,
    pub variance: f64,
    pub err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub d_cos: f64,
    pub h_n: f64,
    pub h_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
}

/// Squared-error decomposition of an ensemble's probability outputs against
/// one-hot labels over `eval`.
pub fn bias_variance_of(models: &[Model], eval: &Dataset) -> Result<BiasVariance> {
    if models.len() < 2 {
        return Err(invalid("R", "need at least two replicates"));
    }
    if eval.is_empty() {
        return Err(invalid("eval", "empty evaluation set"));
    }
    let c = eval.num_classes;
    let r = models.len() as f64;
    let (mut bias, mut variance, mut err) = (0.0, 0.0, 0.0);
    for i in 0..eval.len() {
        let x = eval.xs.row(i);
        let probs: Vec<Vec<f64>> = models.iter().map(|m| m.forward(x)).collect::<Result<_>>()?;
        let mut mean = vec![0.0; c];
        for p in &probs {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / r;
            }
        }
        let onehot = |k: usize| if k == eval.ys[i] { 1.0 } else { 0.0 };
        bias += mean
            .iter()
            .enumerate()
            .map(|(k, m)| (onehot(k) - m).powi(2))
            .sum::<f64>();
        for p in &probs {
            variance += p
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m).powi(2))
                .sum::<f64>()
                / r;
            err += p
                .iter()
                .enumerate()
                .map(|(k, a)| (onehot(k) - a).powi(2))
                .sum::<f64>()
                / r;
        }
    }
    let n = eval.len() as f64;
    Ok(BiasVariance {
        bias: bias / n,
        variance: variance / n,
        err: err / n,
    })
}

/// Trains `replicates` models from one shared initialization on bootstrap
/// resamples of `train` and decomposes their error on `eval`.
pub fn bias_variance(
    spec: ModelSpec,
    train: &Dataset,
    eval: &Dataset,
    replicates: usize,
    settings: TrainSettings,
    rng: &mut RngStream,
) -> Result<BiasVariance> {
    if replicates < 2 {
        return Err(invalid("R", "need at least two replicates"));
    }
    if train.is_empty() {
        return Err(invalid("train", "empty training set"));
    }
    let init = Model::init(spec, rng)?;
    let mut models = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let boot: Vec<usize> = (0..train.len()).map(|_| rng.below(train.len())).collect();
        let mut m = init.clone();
        for _ in 0..settings.epochs {
            let batches = sampling::uniform_batches(rng, &boot, settings.batch_size)?;
            m.sgd_on_indices(&train.xs, &train.ys, &batches, settings.eta)?;
        }
        models.push(m);
    }
    bias_variance_of(&models, eval)
}

/// `1 - cos(g_i, g_j)`, in `[0, 2]`.
pub fn grad_cos_distance(g_i: &[f64], g_j: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(g_i, g_j)?)
}

/// Squared difference of Hessian-diagonal norms and their cosine.
pub fn hessian_metrics(m_i: &Model, m_j: &Model, data: &Batch) -> Result<(f64, f64)> {
    if m_i.spec != m_j.spec {
        return Err(invalid("models", "specs differ"));
    }
    if data.is_empty() {
        return Err(invalid("data", "empty batch"));
    }
    let d_i = hessian_diag_fd(m_i, data, FD_STEP)?;
    let d_j = hessian_diag_fd(m_j, data, FD_STEP)?;
    let h_n = (d_i.norm() - d_j.norm()).powi(2);
    let h_d = cosine(&d_i, &d_j)?;
    Ok((h_n, h_d))
}

/// Gradient distance and Hessian metrics of two models on one batch.
pub fn pair_diagnostics(m_i: &Model, m_j: &Model, data: &Batch) -> Result<PairDiagnostics> {
    let d_cos = grad_cos_distance(&m_i.grad_batch(data)?, &m_j.grad_batch(data)?)?;
    let (h_n, h_d) = hessian_metrics(m_i, m_j, data)?;
    Ok(PairDiagnostics { d_cos, h_n, h_d })
}

/// `l(w) = ½ wᵀ A w + bᵀ w` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub a: Mat64,
    pub b: Vec<f64>,
}

impl QuadraticLoss {
    pub fn new(a: Mat64, b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        if a.rows() != d || a.cols() != d {
            return Err(invalid("a", "must be square and match b"));
        }
        for i in 0..d {
            for j in 0..i {
                if a.row(i)[j] != a.row(j)[i] {
                    return Err(invalid("a", "must be symmetric"));
                }
            }
        }
        Ok(Self { a, b })
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| self.a.row(i).iter().zip(w).map(|(a, x)| a * x).sum::<f64>() + self.b[i])
            .collect()
    }

    pub fn hess_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| self.a.row(i).iter().zip(v).map(|(a, x)| a * x).sum())
            .collect()
    }
}

/// Per-sample quadratic losses evaluated at `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub losses: Vec<QuadraticLoss>,
    pub omega: Vec<f64>,
}

impl QuadraticProblem {
    pub fn random(rng: &mut RngStream, n: usize, dim: usize) -> Result<Self> {
        let mut losses = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.gaussian(dim * dim, 0.0, 1.0)?;
            let mut a = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] = 0.5 * (m[i * dim + j] + m[j * dim + i]);
                }
            }
            losses.push(QuadraticLoss::new(
                Mat64::new(dim, dim, a)?,
                rng.gaussian(dim, 0.0, 1.0)?,
            )?);
        }
        Ok(Self {
            losses,
            omega: rng.gaussian(dim, 0.0, 1.0)?,
        })
    }

    /// Every loss multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            losses: self
                .losses
                .iter()
                .map(|l| QuadraticLoss {
                    a: Mat64::new(
                        l.a.rows(),
                        l.a.cols(),
                        l.a.as_slice().iter().map(|v| v * c).collect(),
                    )
                    .expect("same shape"),
                    b: l.b.iter().map(|v| v * c).collect(),
                })
                .collect(),
            omega: self.omega.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub empirical: Vec64,
    pub closed_form: Vec64,
    pub gap: f64,
}

pub const LEMMA1_MAX_N: usize = 8;

/// Heap's algorithm over `0..n`.
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&perm);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            f(&perm);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Mean over all orderings of `sum_j sum_{i before j} H_j g_i`, against the
/// gradient of `(N²/4)(‖∇F‖² − (1/N²) Σ ‖∇l_j‖²)` evaluated analytically.
pub fn lemma1_check(p: &QuadraticProblem) -> Result<Lemma1Report> {
    let n = p.losses.len();
    if n == 0 {
        return Err(invalid("N", "need at least one loss"));
    }
    if n > LEMMA1_MAX_N {
        return Err(invalid(
            "N",
            format!("at most {LEMMA1_MAX_N} losses (factorial enumeration)"),
        ));
    }
    let dim = p.omega.len();
    if p.losses.iter().any(|l| l.b.len() != dim) {
        return Err(invalid("omega", "dimension differs from the losses"));
    }
    let grads: Vec<Vec<f64>> = p.losses.iter().map(|l| l.grad(&p.omega)).collect();

    let mut total = vec![0.0; dim];
    let mut count = 0usize;
    for_each_permutation(n, |perm| {
        let mut prefix = vec![0.0; dim];
        for &j in perm {
            let hv = p.losses[j].hess_vec(&prefix);
            for (t, v) in total.iter_mut().zip(&hv) {
                *t += v;
            }
            for (s, g) in prefix.iter_mut().zip(&grads[j]) {
                *s += g;
            }
        }
        count += 1;
    });
    let empirical = Vec64(total.into_iter().map(|v| v / count as f64).collect());

    // ∇F = Ā ω + b̄ with Ā, b̄ the means; ∇‖∇F‖² = 2 Ā ∇F and ∇‖∇l_j‖² = 2 A_j ∇l_j
    let nf = n as f64;
    let mut full_grad = vec![0.0; dim];
    for g in &grads {
        for (f, v) in full_grad.iter_mut().zip(g) {
            *f += v / nf;
        }
    }
    let mut mean_hess_fg = vec![0.0; dim];
    let mut own = vec![0.0; dim];
    for (l, g) in p.losses.iter().zip(&grads) {
        for (m, v) in mean_hess_fg.iter_mut().zip(l.hess_vec(&full_grad)) {
            *m += v / nf;
        }
        for (o, v) in own.iter_mut().zip(l.hess_vec(g)) {
            *o += v;
        }
    }
    let closed_form = Vec64(
        mean_hess_fg
            .iter()
            .zip(&own)
            .map(|(hf, o)| nf * nf / 4.0 * (2.0 * hf - 2.0 / (nf * nf) * o))
            .collect(),
    );
    let gap = empirical
        .iter()
        .zip(closed_form.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Lemma1Report {
        empirical,
        closed_form,
        gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    /// Batch size `B`.
    pub batch_size: usize,
    /// Batches per epoch `N`; the dataset holds `N * B` rows.
    pub n_batches: usize,
    pub trials: usize,
    /// Hard-pool multiplier; `None` runs without an attack.
    pub kappa: Option<usize>,
    /// Step size of the attacked epoch.
    pub eta: f64,
    pub gd_lr: f64,
    pub gd_max_iters: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            batch_size: 8,
            n_batches: 10,
            trials: 200,
            kappa: Some(2),
            eta: 0.1,
            gd_lr: 1.0,
            gd_max_iters: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub rhs: f64,
    pub eps0_sq: f64,
    pub epsb_sq: f64,
    pub grad_norm_at_optimum: f64,
    pub negative_rhs: bool,
    pub holds: bool,
}

/// Gradient norm above which the honest optimum is rejected.
pub const CONVERGENCE_TOL: f64 = 1e-2;

/// `B (1 - 1/N)² ε₀² − (B − 1)/(N B) ε_b²`.
pub fn theorem1_rhs(b: usize, n: usize, eps0_sq: f64, epsb_sq: f64) -> f64 {
    let (bf, nf) = (b as f64, n as f64);
    bf * (1.0 - 1.0 / nf).powi(2) * eps0_sq - (bf - 1.0) / (nf * bf) * epsb_sq
}

fn max_sample_grad_sq(m: &Model, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    idx.iter().try_fold(0.0f64, |acc, &i| {
        Ok(acc.max(l2_norm_sq(&m.grad_indices(&ds.xs, &ds.ys, &[i])?)))
    })
}

/// Full-batch gradient descent from `init`; stops once the gradient norm
/// falls below `CONVERGENCE_TOL / 100` or the iteration budget runs out.
pub fn converge_full_batch(
    init: &Model,
    ds: &Dataset,
    idx: &[usize],
    lr: f64,
    max_iters: usize,
) -> Result<(Model, f64)> {
    let mut m = init.clone();
    let mut g = m.grad_indices(&ds.xs, &ds.ys, idx)?;
    for _ in 0..max_iters {
        if g.norm() < CONVERGENCE_TOL / 100.0 {
            break;
        }
        m.sgd_step(&g, lr)?;
        g = m.grad_indices(&ds.xs, &ds.ys, idx)?;
    }
    if !m.params.is_finite() {
        return Err(Error::NonFinite("full-batch descent".into()));
    }
    Ok((m, g.norm()))
}

/// Monte Carlo estimate of `E‖∇F_b(ω*) − ∇F_{b'}(ω^b)‖²` where `b` is a
/// uniform batch at the honest optimum and `b'` a bad batch drawn from the
/// Top-κ pool at the model after one attacked epoch.
pub fn theorem1_check(
    spec: ModelSpec,
    ds: &Dataset,
    cfg: &Theorem1Config,
    rng: &mut RngStream,
) -> Result<Theorem1Report> {
    let (b, n) = (cfg.batch_size, cfg.n_batches);
    if b < 2 || n < 2 {
        return Err(invalid("B", "B and N must both be >= 2"));
    }
    if cfg.trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    let size = n * b;
    if ds.len() < size {
        return Err(invalid(
            "dataset",
            format!("needs N*B = {size} rows, has {}", ds.len()),
        ));
    }
    let idx: Vec<usize> = (0..size).collect();
    let init = Model::zeros(spec)?;
    let (star, gnorm) = converge_full_batch(&init, ds, &idx, cfg.gd_lr, cfg.gd_max_iters)?;
    if gnorm > CONVERGENCE_TOL {
        return Err(Error::NotConverged(format!(
            "honest optimum has gradient norm {gnorm:.3e} > {CONVERGENCE_TOL}"
        )));
    }

    let (bad, pool) = match cfg.kappa {
        Some(kappa) => {
            let pool = sampling::build_hard_pool(&star, ds, &idx, kappa, b)?;
            let batches = sampling::topk_batches(rng, &pool, n, b)?;
            let mut bad = star.clone();
            bad.sgd_on_indices(&ds.xs, &ds.ys, &batches, cfg.eta)?;
            (bad, Some(pool))
        }
        None => (star.clone(), None),
    };

    let mut lhs = 0.0;
    for _ in 0..cfg.trials {
        let mut perm = idx.clone();
        rng.shuffle(&mut perm);
        let uniform = &perm[..b];
        let g_star = star.grad_indices(&ds.xs, &ds.ys, uniform)?;
        let g_bad = match &pool {
            Some(pool) => {
                let draw: Vec<usize> = (0..b)
                    .map(|_| pool.indices[rng.below(pool.indices.len())])
                    .collect();
                bad.grad_indices(&ds.xs, &ds.ys, &draw)?
            }
            None => bad.grad_indices(&ds.xs, &ds.ys, uniform)?,
        };
        lhs += l2_norm_sq(&g_star.sub(&g_bad)?) / cfg.trials as f64;
    }

    let eps0_sq = max_sample_grad_sq(&star, ds, &idx)?;
    let pool_idx = pool.as_ref().map_or(&idx, |p| &p.indices);
    let epsb_sq = max_sample_grad_sq(&bad, ds, pool_idx)?;
    let rhs = theorem1_rhs(b, n, eps0_sq, epsb_sq);
    let negative_rhs = rhs < 0.0;
    Ok(Theorem1Report {
        lhs,
        rhs,
        eps0_sq,
        epsb_sq,
        grad_norm_at_optimum: gnorm,
        negative_rhs,
        holds: !negative_rhs && lhs <= rhs,
    })
}

/// Runs SGD over `batches` in order with a caller-supplied batch gradient.
pub fn sgd_path<G>(start: &[f64], batches: &[usize], eta: f64, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut w = start.to_vec();
    for &k in batches {
        let g = grad(&w, k)?;
        for (x, d) in w.iter_mut().zip(&g) {
            *x -= eta * d;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sgd path diverged".into()));
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEffectReport {
    pub etas: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Least-squares slope of log deviation against log η; `None` if any deviation is zero.
    pub exponent: Option<f64>,
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if ys.iter().any(|&y| y <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Distance between the end points of two orderings of the same batches,
/// at `η`, `η/2` and `η/4`, with the fitted scaling exponent.
pub fn order_effect_probe_with<G>(
    start: &[f64],
    order_a: &[usize],
    order_b: &[usize],
    eta: f64,
    mut grad: G,
) -> Result<OrderEffectReport>
where
    G: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if !(eta > 0.0) {
        return Err(invalid("η", "must be > 0"));
    }
    let mut a = order_a.to_vec();
    let mut b = order_b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(invalid("order", "the two orders must use the same batches"));
    }
    let etas = vec![eta, eta / 2.0, eta / 4.0];
    let mut deviations = Vec::with_capacity(3);
    for &e in &etas {
        let wa = sgd_path(start, order_a, e, &mut grad)?;
        let wb = sgd_path(start, order_b, e, &mut grad)?;
        deviations.push(
            wa.iter()
                .zip(&wb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
    }
    Ok(OrderEffectReport {
        exponent: loglog_slope(&etas, &deviations),
        etas,
        deviations,
    })
}

/// Splits `ds` into `n_batches` shuffled batches and compares the forward
/// order with the reversed order.
pub fn order_effect_probe(
    model: &Model,
    ds: &Dataset,
    eta: f64,
    n_batches: usize,
    rng: &mut RngStream,
) -> Result<OrderEffectReport> {
    if n_batches < 2 || n_batches > ds.len() {
        return Err(invalid("N", "need 2 <= N <= dataset size"));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut perm);
    let size = ds.len().div_ceil(n_batches);
    let batches: Vec<Vec<usize>> = perm.chunks(size).map(<[usize]>::to_vec).collect();
    let forward: Vec<usize> = (0..batches.len()).collect();
    let reversed: Vec<usize> = forward.iter().rev().copied().collect();
    let mut probe = model.clone();
    order_effect_probe_with(&model.params, &forward, &reversed, eta, |w, k| {
        probe.params.0.copy_from_slice(w);
        probe.grad_indices(&ds.xs, &ds.ys, &batches[k]).map(|g| g.0)
    })
}

/// Hessian-vector product of the mean batch loss by central differences.
pub fn hvp_fd(m: &Model, xs: &Mat64, ys: &[usize], idx: &[usize], v: &[f64]) -> Result<Vec64> {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return Ok(Vec64::zeros(v.len()));
    }
    let h = FD_STEP / vn;
    let mut probe = m.clone();
    probe.params.axpy(h, v)?;
    let gp = probe.grad_indices(xs, ys, idx)?;
    probe.params.0.copy_from_slice(&m.params);
    probe.params.axpy(-h, v)?;
    let gm = probe.grad_indices(xs, ys, idx)?;
    Ok(Vec64(
        gp.iter()
            .zip(gm.iter())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect(),
    ))
}

/// Norm of `ω_N − (ω₀ − η Σ_j g_j(ω₀) + η² ζ(ω₀))` after one in-order epoch,
/// where `ζ = Σ_j Σ_{i<j} H_j g_i`.
pub fn taylor_residual(
    m: &Model,
    xs: &Mat64,
    ys: &[usize],
    batches: &[Vec<usize>],
    eta: f64,
) -> Result<f64> {
    let mut actual = m.clone();
    actual.sgd_on_indices(xs, ys, batches, eta)?;
    let grads: Vec<Vec64> = batches
        .iter()
        .map(|b| m.grad_indices(xs, ys, b))
        .collect::<Result<_>>()?;
    let dim = m.params.len();
    let mut first = Vec64::zeros(dim);
    let mut zeta = Vec64::zeros(dim);
    let mut prefix = Vec64::zeros(dim);
    for (b, g) in batches.iter().zip(&grads) {
        zeta.axpy(1.0, &hvp_fd(m, xs, ys, b, &prefix)?)?;
        prefix.axpy(1.0, g)?;
        first.axpy(1.0, g)?;
    }
    let mut predicted = m.params.clone();
    predicted.axpy(-eta, &first)?;
    predicted.axpy(eta * eta, &zeta)?;
    Ok(actual.params.sub(&predicted)?.norm())
}

/// Flat diagnostics report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub d_cos: f64,
    pub h_n: f64,
    pub h_d: f64,
    pub bias: f64,
    pub variance: f64,
    pub err: f64,
    pub lemma1_gap: f64,
    pub thm1_lhs: f64,
    pub thm1_rhs: f64,
}
