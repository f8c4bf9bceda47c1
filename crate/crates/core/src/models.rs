//! Desk-scale classifiers with hand-derived gradients.
//!
//! Two architectures share one flat parameter layout, weights then biases,
//! layer by layer. Weight matrices are stored input-major
//! (`w[j * out + c]` connects input `j` to output `c`), so a forward pass sums
//! each output sequentially over the inputs in data order.
//!
//! Besides softmax classification the same networks serve as small regressors
//! (the SAC actor and critics) through [`Model::outputs`] and
//! [`Model::accumulate_vjp`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkit::{Mat64, ParamVector, RngStream, Vec64};

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Multinomial logistic regression.
    LR,
    /// One hidden ReLU layer.
    MLP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    /// Zero for LR.
    pub hidden_dim: usize,
    /// Output width. At least 2 for classifiers built with [`ModelSpec::lr`] / [`ModelSpec::mlp`].
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn lr(input_dim: usize, num_classes: usize) -> Result<Self> {
        let s = Self {
            arch: Arch::LR,
            input_dim,
            hidden_dim: 0,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        let s = Self {
            arch: Arch::MLP,
            input_dim,
            hidden_dim,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    /// MLP with an arbitrary output width (>= 1), used for value/policy heads.
    pub fn mlp_head(input_dim: usize, hidden_dim: usize, outputs: usize) -> Result<Self> {
        let s = Self {
            arch: Arch::MLP,
            input_dim,
            hidden_dim,
            num_classes: outputs,
        };
        s.validate_shape()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid(
                "num_classes",
                "classifiers need at least 2 classes",
            ));
        }
        self.validate_shape()
    }

    fn validate_shape(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim", "must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes", "must be >= 1"));
        }
        match self.arch {
            Arch::LR if self.hidden_dim != 0 => {
                Err(invalid("hidden_dim", "must be 0 for logistic regression"))
            }
            Arch::MLP if self.hidden_dim == 0 => Err(invalid("hidden_dim", "MLP needs >= 1")),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.arch {
            Arch::LR => d * c + c,
            Arch::MLP => d * h + h + h * c + c,
        }
    }

    /// Offsets of (w1, b1, w2, b2); for LR w2/b2 are empty.
    fn offsets(&self) -> [usize; 4] {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.arch {
            Arch::LR => [0, d * c, d * c + c, d * c + c],
            Arch::MLP => [0, d * h, d * h + h, d * h + h + h * c],
        }
    }

    /// Parameter range of the final layer (weights and biases).
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        match self.arch {
            Arch::LR => 0..self.param_count(),
            Arch::MLP => self.offsets()[2]..self.param_count(),
        }
    }
}

/// Labeled mini-batch with its source-dataset indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Mat64,
    pub ys: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(xs: Mat64, ys: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if xs.rows() == 0 || xs.rows() != ys.len() || ys.len() != indices.len() {
            return Err(invalid(
                "batch",
                format!(
                    "rows {}, labels {}, indices {}",
                    xs.rows(),
                    ys.len(),
                    indices.len()
                ),
            ));
        }
        Ok(Self { xs, ys, indices })
    }

    /// Gather rows `idx` of a feature matrix and label vector.
    pub fn gather(xs: &Mat64, ys: &[usize], idx: &[usize]) -> Result<Self> {
        Self::new(
            xs.select_rows(idx),
            idx.iter().map(|&i| ys[i]).collect(),
            idx.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Default)]
struct Scratch {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    d_hidden: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl Model {
    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn init(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate_shape()?;
        let mut p = vec![0.0; spec.param_count()];
        let [w1, b1, w2, b2] = spec.offsets();
        let fill = |slot: &mut [f64], fan_in: usize, rng: &mut RngStream| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in slot {
                *v = (2.0 * rng.next_f64() - 1.0) * a;
            }
        };
        fill(&mut p[w1..b1], spec.input_dim, rng);
        if spec.arch == Arch::MLP {
            fill(&mut p[w2..b2], spec.hidden_dim, rng);
        }
        Ok(Self {
            spec,
            params: Vec64(p),
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate_shape()?;
        Ok(Self {
            spec,
            params: Vec64::zeros(spec.param_count()),
        })
    }

    pub fn with_params(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate_shape()?;
        if params.len() != spec.param_count() {
            return Err(Error::LengthMismatch {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::LengthMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        let spec = &self.spec;
        let p = &self.params.0;
        let [w1, b1, w2, b2] = spec.offsets();
        let c = spec.num_classes;
        match spec.arch {
            Arch::LR => {
                s.out.clear();
                s.out.extend_from_slice(&p[b1..b1 + c]);
                affine_acc(x, &p[w1..b1], &mut s.out);
            }
            Arch::MLP => {
                let h = spec.hidden_dim;
                s.hidden_pre.clear();
                s.hidden_pre.extend_from_slice(&p[b1..b1 + h]);
                affine_acc(x, &p[w1..b1], &mut s.hidden_pre);
                s.hidden.clear();
                s.hidden.extend(s.hidden_pre.iter().map(|&v| v.max(0.0)));
                s.out.clear();
                s.out.extend_from_slice(&p[b2..b2 + c]);
                affine_acc(&s.hidden, &p[w2..b2], &mut s.out);
            }
        }
    }

    /// Raw network outputs (logits for classifiers).
    pub fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut s = Scratch::default();
        self.forward_into(x, &mut s);
        Ok(s.out)
    }

    /// Softmax class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.outputs(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Cross-entropy `-ln p_y`.
    pub fn sample_loss(&self, x: &[f64], y: usize) -> Result<f64> {
        let p = self.forward(x)?;
        Ok(-p[y].max(PROB_FLOOR).ln())
    }

    /// Sample difficulty `1 - p_y`, in `[0, 1]`.
    pub fn sample_error(&self, x: &[f64], y: usize) -> Result<f64> {
        let p = self.forward(x)?;
        Ok((1.0 - p[y]).clamp(0.0, 1.0))
    }

    /// Sample difficulty for rows `idx` of a dataset.
    pub fn sample_errors(&self, xs: &Mat64, ys: &[usize], idx: &[usize]) -> Vec<f64> {
        let mut s = Scratch::default();
        idx.iter()
            .map(|&i| {
                self.forward_into(xs.row(i), &mut s);
                softmax_in_place(&mut s.out);
                (1.0 - s.out[ys[i]]).clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Per-sample cross-entropy for rows `idx`.
    pub fn sample_losses(&self, xs: &Mat64, ys: &[usize], idx: &[usize]) -> Vec<f64> {
        let mut s = Scratch::default();
        idx.iter()
            .map(|&i| {
                self.forward_into(xs.row(i), &mut s);
                softmax_in_place(&mut s.out);
                -s.out[ys[i]].max(PROB_FLOOR).ln()
            })
            .collect()
    }

    /// Fraction of rows `idx` whose argmax prediction equals the label.
    pub fn accuracy(&self, xs: &Mat64, ys: &[usize], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let mut s = Scratch::default();
        let hits = idx
            .iter()
            .filter(|&&i| {
                self.forward_into(xs.row(i), &mut s);
                argmax(&s.out) == ys[i]
            })
            .count();
        hits as f64 / idx.len() as f64
    }

    /// Add `scale * J^T d_out` (parameter part) into `grad`; returns the input
    /// gradient `J_x^T d_out` when `want_input` is set.
    pub fn accumulate_vjp(
        &self,
        x: &[f64],
        d_out: &[f64],
        scale: f64,
        grad: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        self.check_input(x)?;
        if d_out.len() != self.spec.num_classes {
            return Err(Error::LengthMismatch {
                expected: self.spec.num_classes,
                got: d_out.len(),
            });
        }
        let mut s = Scratch::default();
        self.forward_into(x, &mut s);
        let scaled: Vec<f64> = d_out.iter().map(|d| d * scale).collect();
        Ok(self.backward_from(x, &scaled, &mut s, grad, want_input))
    }

    fn backward_from(
        &self,
        x: &[f64],
        d_out: &[f64],
        s: &mut Scratch,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let spec = &self.spec;
        let p = &self.params.0;
        let [w1, b1, w2, b2] = spec.offsets();
        match spec.arch {
            Arch::LR => {
                outer_acc(x, d_out, &mut grad[w1..b1]);
                for (g, d) in grad[b1..].iter_mut().zip(d_out) {
                    *g += d;
                }
                want_input.then(|| back_through(&p[w1..b1], d_out, spec.input_dim))
            }
            Arch::MLP => {
                let h = spec.hidden_dim;
                outer_acc(&s.hidden, d_out, &mut grad[w2..b2]);
                for (g, d) in grad[b2..].iter_mut().zip(d_out) {
                    *g += d;
                }
                s.d_hidden = back_through(&p[w2..b2], d_out, h);
                for (dh, &pre) in s.d_hidden.iter_mut().zip(&s.hidden_pre) {
                    if pre <= 0.0 {
                        *dh = 0.0;
                    }
                }
                outer_acc(x, &s.d_hidden, &mut grad[w1..b1]);
                for (g, d) in grad[b1..b1 + h].iter_mut().zip(&s.d_hidden) {
                    *g += d;
                }
                want_input.then(|| back_through(&p[w1..b1], &s.d_hidden, spec.input_dim))
            }
        }
    }

    /// Mean cross-entropy gradient over rows `idx`.
    pub fn grad_indices(&self, xs: &Mat64, ys: &[usize], idx: &[usize]) -> Result<ParamVector> {
        if idx.is_empty() {
            return Err(invalid("batch", "empty"));
        }
        if xs.cols() != self.spec.input_dim {
            return Err(Error::LengthMismatch {
                expected: self.spec.input_dim,
                got: xs.cols(),
            });
        }
        let mut grad = vec![0.0; self.spec.param_count()];
        let mut s = Scratch::default();
        let inv = 1.0 / idx.len() as f64;
        let mut d = vec![0.0; self.spec.num_classes];
        for &i in idx {
            let x = xs.row(i);
            self.forward_into(x, &mut s);
            softmax_in_place(&mut s.out);
            for (dc, &pc) in d.iter_mut().zip(&s.out) {
                *dc = pc * inv;
            }
            d[ys[i]] -= inv;
            self.backward_from(x, &d, &mut s, &mut grad, false);
        }
        Ok(Vec64(grad))
    }

    /// Mean cross-entropy gradient of a batch.
    pub fn grad_batch(&self, b: &Batch) -> Result<ParamVector> {
        let idx: Vec<usize> = (0..b.len()).collect();
        self.grad_indices(&b.xs, &b.ys, &idx)
    }

    /// Mean cross-entropy over a batch.
    pub fn batch_loss(&self, b: &Batch) -> f64 {
        let idx: Vec<usize> = (0..b.len()).collect();
        let l = self.sample_losses(&b.xs, &b.ys, &idx);
        l.iter().sum::<f64>() / l.len() as f64
    }

    /// Gradient of `-ln p_y` with respect to the input features.
    pub fn input_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut s = Scratch::default();
        self.forward_into(x, &mut s);
        softmax_in_place(&mut s.out);
        let mut d = s.out.clone();
        d[y] -= 1.0;
        let mut sink = vec![0.0; self.spec.param_count()];
        Ok(self
            .backward_from(x, &d, &mut s, &mut sink, true)
            .expect("input gradient requested"))
    }

    pub fn sgd_step(&mut self, grad: &[f64], eta: f64) -> Result<()> {
        self.params.axpy(-eta, grad)
    }

    /// One SGD step per index batch, in order.
    pub fn sgd_on_indices(
        &mut self,
        xs: &Mat64,
        ys: &[usize],
        batches: &[Vec<usize>],
        eta: f64,
    ) -> Result<()> {
        for b in batches {
            let g = self.grad_indices(xs, ys, b)?;
            self.sgd_step(&g, eta)?;
        }
        Ok(())
    }

    /// Serialize as `FSPM` checkpoint: magic, u32 version, spec as LE u32s, LE f64 params.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let arch: u32 = match self.spec.arch {
            Arch::LR => 0,
            Arch::MLP => 1,
        };
        for v in [
            arch,
            self.spec.input_dim as u32,
            self.spec.hidden_dim as u32,
            self.spec.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params.iter() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parse one checkpoint from the front of `bytes`; returns the model and bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 24 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u(4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let arch = match u(8) {
            0 => Arch::LR,
            1 => Arch::MLP,
            _ => return Err(bad("unknown architecture")),
        };
        let spec = ModelSpec {
            arch,
            input_dim: u(12) as usize,
            hidden_dim: u(16) as usize,
            num_classes: u(20) as usize,
        };
        spec.validate_shape()?;
        let n = spec.param_count();
        let end = 24 + 8 * n;
        if bytes.len() < end {
            return Err(bad("truncated parameters"));
        }
        let params = bytes[24..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self::with_params(spec, Vec64(params))?, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(m)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSPM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `out[c] += sum_j x[j] * w[j*C + c]`, sequential in `j`; zero inputs are skipped.
#[inline]
fn affine_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let c = out.len();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &w[j * c..(j + 1) * c];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xj * wv;
        }
    }
}

/// `g[j*C + c] += x[j] * d[c]`
#[inline]
fn outer_acc(x: &[f64], d: &[f64], g: &mut [f64]) {
    let c = d.len();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &mut g[j * c..(j + 1) * c];
        for (gv, &dv) in row.iter_mut().zip(d) {
            *gv += xj * dv;
        }
    }
}

/// `r[j] = sum_c w[j*C + c] * d[c]`
#[inline]
fn back_through(w: &[f64], d: &[f64], n_in: usize) -> Vec<f64> {
    let c = d.len();
    (0..n_in)
        .map(|j| {
            let row = &w[j * c..(j + 1) * c];
            let mut s = 0.0;
            for (wv, dv) in row.iter().zip(d) {
                s += wv * dv;
            }
            s
        })
        .collect()
}

/// Apply one SGD step per batch, in order, and return the updated model.
pub fn sgd_epoch(m: &Model, batches: &[Batch], eta: f64) -> Result<Model> {
    if !(eta > 0.0) {
        return Err(invalid("eta", "must be > 0"));
    }
    let mut out = m.clone();
    for b in batches {
        let g = out.grad_batch(b)?;
        out.sgd_step(&g, eta)?;
    }
    Ok(out)
}

/// Default finite-difference base step.
pub const FD_STEP: f64 = 1e-4;

/// Central-difference Hessian diagonal of any objective given its gradient.
///
/// Coordinate `k` uses step `h * (1 + |w_k|)`.
pub fn hessian_diag_fd_with<G>(params: &[f64], h: f64, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(invalid("h", "must be > 0"));
    }
    let mut w = params.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for k in 0..w.len() {
        let orig = w[k];
        let hk = h * (1.0 + orig.abs());
        w[k] = orig + hk;
        let gp = grad(&w)?[k];
        w[k] = orig - hk;
        let gm = grad(&w)?[k];
        w[k] = orig;
        out.push((gp - gm) / (2.0 * hk));
    }
    Ok(out)
}

/// Hessian diagonal of the mean cross-entropy over `data`.
pub fn hessian_diag_fd(m: &Model, data: &Batch, h: f64) -> Result<ParamVector> {
    let mut probe = m.clone();
    let d = hessian_diag_fd_with(&m.params, h, |w| {
        probe.params.0.copy_from_slice(w);
        probe.grad_batch(data).map(|g| g.0)
    })?;
    Ok(Vec64(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(rng: &mut RngStream, n: usize, d: usize, c: usize) -> Batch {
        let xs = Mat64::new(n, d, rng.uniform(n * d)).unwrap();
        let ys = (0..n).map(|i| i % c).collect();
        Batch::new(xs, ys, (0..n).collect()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::lr(4, 1).is_err());
        assert!(ModelSpec::lr(0, 3).is_err());
        assert!(ModelSpec::mlp(4, 0, 3).is_err());
        assert_eq!(ModelSpec::lr(4, 3).unwrap().param_count(), 15);
        assert_eq!(
            ModelSpec::mlp(4, 5, 3).unwrap().param_count(),
            20 + 5 + 15 + 3
        );
    }

    #[test]
    fn zero_lr_is_uniform() {
        let m = Model::zeros(ModelSpec::lr(3, 4).unwrap()).unwrap();
        let p = m.forward(&[0.2, 0.9, 0.1]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariant() {
        let mut rng = RngStream::new(3, 0);
        for spec in [
            ModelSpec::lr(5, 3).unwrap(),
            ModelSpec::mlp(5, 4, 3).unwrap(),
        ] {
            let mut m = Model::init(spec, &mut rng).unwrap();
            let x = rng.uniform(5);
            let p = m.forward(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
            // shift every output bias by the same constant
            let r = spec.last_layer_range();
            let c = spec.num_classes;
            for v in &mut m.params[r.end - c..r.end] {
                *v += 3.7;
            }
            let q = m.forward(&x).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_and_error_examples() {
        let m = Model::zeros(ModelSpec::lr(2, 10).unwrap()).unwrap();
        assert!((m.sample_loss(&[0.5, 0.5], 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((m.sample_error(&[0.5, 0.5], 3).unwrap() - 0.9).abs() < 1e-12);
        // nearly certain prediction
        let mut sure = Model::zeros(ModelSpec::lr(1, 2).unwrap()).unwrap();
        sure.params[2] = 800.0;
        assert!(sure.sample_loss(&[0.0], 0).unwrap() < 1e-12);
        assert!(sure.sample_error(&[0.0], 0).unwrap() < 1e-12);
    }

    #[test]
    fn error_and_loss_share_ordering() {
        let mut rng = RngStream::new(4, 0);
        let m = Model::init(ModelSpec::mlp(3, 6, 3).unwrap(), &mut rng).unwrap();
        let b = toy_batch(&mut rng, 20, 3, 3);
        let idx: Vec<usize> = (0..20).collect();
        let e = m.sample_errors(&b.xs, &b.ys, &idx);
        let l = m.sample_losses(&b.xs, &b.ys, &idx);
        for i in 0..20 {
            for j in 0..20 {
                if e[i] < e[j] {
                    assert!(l[i] <= l[j]);
                }
            }
        }
    }

    #[test]
    fn one_step_reduces_sample_loss() {
        let mut rng = RngStream::new(5, 0);
        let mut m = Model::init(ModelSpec::mlp(4, 8, 3).unwrap(), &mut rng).unwrap();
        let b = toy_batch(&mut rng, 1, 4, 3);
        let before = m.sample_loss(b.xs.row(0), b.ys[0]).unwrap();
        let g = m.grad_batch(&b).unwrap();
        m.sgd_step(&g, 1e-3).unwrap();
        assert!(m.sample_loss(b.xs.row(0), b.ys[0]).unwrap() < before);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let mut rng = RngStream::new(6, 0);
        let m = Model::init(ModelSpec::lr(3, 3).unwrap(), &mut rng).unwrap();
        let b = toy_batch(&mut rng, 4, 3, 3);
        let idx = [0, 1, 2, 3, 0, 1, 2, 3];
        let g1 = m.grad_batch(&b).unwrap();
        let g2 = m.grad_indices(&b.xs, &b.ys, &idx).unwrap();
        for (a, c) in g1.iter().zip(g2.iter()) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_epoch_edge_cases() {
        let mut rng = RngStream::new(7, 0);
        let m = Model::init(ModelSpec::lr(3, 2).unwrap(), &mut rng).unwrap();
        assert_eq!(sgd_epoch(&m, &[], 0.1).unwrap(), m);
        let b = toy_batch(&mut rng, 5, 3, 2);
        let once = sgd_epoch(&m, std::slice::from_ref(&b), 0.1).unwrap();
        let mut manual = m.clone();
        manual.sgd_step(&m.grad_batch(&b).unwrap(), 0.1).unwrap();
        assert_eq!(once, manual);
        assert!(sgd_epoch(&m, &[], 0.0).is_err());
    }

    #[test]
    fn quadratic_stub_hessian_is_identity() {
        let w = vec![0.3, -2.0, 5.0, 0.0];
        let d = hessian_diag_fd_with(&w, FD_STEP, |v| Ok(v.to_vec())).unwrap();
        assert!(d.iter().all(|&h| (h - 1.0).abs() < 1e-8));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = RngStream::new(8, 0);
        let m = Model::init(ModelSpec::mlp(3, 2, 4).unwrap(), &mut rng).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"FSPM");
        assert_eq!(Model::from_bytes(&bytes).unwrap(), m);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let m = Model::zeros(ModelSpec::lr(3, 2).unwrap()).unwrap();
        assert!(m.forward(&[1.0]).is_err());
        assert!(m.input_grad(&[1.0, 2.0], 0).is_err());
    }
}
