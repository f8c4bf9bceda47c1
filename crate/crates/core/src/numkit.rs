//! Dense vector/matrix helpers and reproducible random streams.
//!
//! Every reduction sums sequentially in data order so results are bit-stable
//! for fixed inputs; the test oracles rely on that.

use std::ops::{Deref, DerefMut};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Flat real-valued vector. Model parameters and client updates use this layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec64(pub Vec<f64>);

/// Model parameters or an update delta; same layout as [`crate::models::Model::params`].
pub type ParamVector = Vec64;

impl Vec64 {
    pub fn zeros(len: usize) -> Self {
        Vec64(vec![0.0; len])
    }

    pub fn basis(len: usize, k: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[k] = 1.0;
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2_norm_sq(self).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Vec64 {
        Vec64(self.0.iter().map(|x| alpha * x).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &[f64]) -> Result<Vec64> {
        check_len(self.len(), other.len())?;
        Ok(Vec64(
            self.0.iter().zip(other).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &[f64]) -> Result<Vec64> {
        check_len(self.len(), other.len())?;
        Ok(Vec64(
            self.0.iter().zip(other).map(|(a, b)| a + b).collect(),
        ))
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vec64 {
    fn from(v: Vec<f64>) -> Self {
        Vec64(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(invalid(
                "data",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat64 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat64 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Inner product, summed left to right.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn l2_norm_sq(a: &[f64]) -> f64 {
    dot_unchecked(a, a)
}

pub fn l2_dist_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    Ok(s)
}

/// Cosine similarity. Errors when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let ab = dot(a, b)?;
    let na = l2_norm_sq(a).sqrt();
    let nb = l2_norm_sq(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const MIX_A: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(MIX_A);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a tuple of labels (round, client, purpose, ...) into a stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5151_F00D_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

/// Counter-based random stream.
///
/// `(seed, stream_id)` selects a ChaCha12 keystream; `counter` is the number of
/// 64-bit draws consumed so far. Any stream can be rebuilt at any position
/// with [`RngStream::at`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        inner.set_word_pos(u128::from(counter) * 2);
        Self {
            seed,
            stream_id,
            counter,
            inner,
        }
    }

    /// Stream keyed by a label tuple, e.g. `[round, client_id, PURPOSE]`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn draw(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// One uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.draw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    /// Standard normal via Box–Muller; consumes two uniforms per value.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, n: usize, mean: f64, var: f64) -> Result<Vec<f64>> {
        if !(var >= 0.0) || !var.is_finite() {
            return Err(invalid("var", format!("variance must be >= 0, got {var}")));
        }
        let sd = var.sqrt();
        Ok((0..n).map(|_| mean + sd * self.next_normal()).collect())
    }

    /// Uniform integer in `0..n` (n > 0), by rejection so there is no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.draw();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.draw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// `rng_uniform` entry point: `n` uniforms in `[0, 1)`.
pub fn rng_uniform(s: &mut RngStream, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("n", "must be >= 1"));
    }
    Ok(s.uniform(n))
}

/// `rng_gaussian` entry point.
pub fn rng_gaussian(s: &mut RngStream, n: usize, mean: f64, var: f64) -> Result<Vec<f64>> {
    s.gaussian(n, mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(dot(&[1.5, -2.0, 3.0], &[0.0; 3]).unwrap(), 0.0);
        let v = [0.3, -1.25, 7.0];
        for k in 0..3 {
            assert_eq!(dot(&Vec64::basis(3, k), &v).unwrap(), v[k]);
        }
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm_sq(&[3.0, 4.0]), 25.0);
        assert_eq!(l2_norm_sq(&[0.0; 4]), 0.0);
        assert_eq!(l2_norm_sq(&[1.0; 4]), 4.0);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.5, -2.0, 1.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine(&[0.0, 0.0], &[0.0, 1.0]),
            Err(Error::ZeroNorm("cosine"))
        );
    }

    #[test]
    fn uniform_replays_and_streams_differ() {
        let a = RngStream::new(7, 1).uniform(64);
        let b = RngStream::new(7, 1).uniform(64);
        let c = RngStream::new(7, 2).uniform(64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut s = RngStream::new(11, 3);
        let xs = rng_uniform(&mut s, 1000).unwrap();
        assert_eq!(s.counter(), 1000);
        let mean = xs.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn stream_resumes_from_counter() {
        let mut s = RngStream::new(5, 9);
        let head = s.uniform(10);
        let tail = s.uniform(10);
        let mut r = RngStream::at(5, 9, 10);
        assert_eq!(r.uniform(10), tail);
        assert_ne!(head, tail);
    }

    #[test]
    fn gaussian_examples() {
        let mut s = RngStream::new(1, 1);
        assert!(s.gaussian(10, 3.5, 0.0).unwrap().iter().all(|&x| x == 3.5));
        let xs = RngStream::new(2, 2).gaussian(10_000, 0.0, 1.0).unwrap();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert_eq!(xs, RngStream::new(2, 2).gaussian(10_000, 0.0, 1.0).unwrap());
        assert!(s.gaussian(1, 0.0, -1.0).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn dot_symmetric_bilinear(a in vecs(6), b in vecs(6), c in vecs(6), alpha in -5.0f64..5.0) {
            prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
            let mix: Vec<f64> = b.iter().zip(&c).map(|(x, y)| alpha * x + y).collect();
            let lhs = dot(&a, &mix).unwrap();
            let rhs = alpha * dot(&a, &b).unwrap() + dot(&a, &c).unwrap();
            let scale = 1.0 + a.iter().zip(&b).map(|(x, y)| (alpha * x * y).abs()).sum::<f64>()
                + a.iter().zip(&c).map(|(x, y)| (x * y).abs()).sum::<f64>();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn cosine_scale_invariant(a in vecs(5), b in vecs(5), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            prop_assume!(l2_norm_sq(&a) > 1e-6 && l2_norm_sq(&b) > 1e-6);
            let sa: Vec<f64> = a.iter().map(|x| s * x).collect();
            let tb: Vec<f64> = b.iter().map(|x| t * x).collect();
            let c0 = cosine(&a, &b).unwrap();
            prop_assert!((cosine(&sa, &tb).unwrap() - c0).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c0));
        }
    }
}
