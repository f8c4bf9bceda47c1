//! Dataset ingestion (IDX), synthetic data, and client partitioning.

use std::path::Path;

use rand_distr::{Distribution, Gamma};

use crate::error::{invalid, Error, Result};
use crate::numkit::{Mat64, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled examples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Mat64,
    pub ys: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        xs: Mat64,
        ys: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if ys.is_empty() {
            return Err(invalid("dataset", "empty dataset"));
        }
        if xs.rows() != ys.len() {
            return Err(Error::LengthMismatch {
                expected: xs.rows(),
                got: ys.len(),
            });
        }
        if let Some(&bad) = ys.iter().find(|&&y| y >= num_classes) {
            return Err(invalid("labels", format!("label {bad} >= {num_classes}")));
        }
        if xs.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("features", "values must lie in [0, 1]"));
        }
        Ok(Self {
            xs,
            ys,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.cols()
    }

    /// Subset with rows `idx` (in that order).
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Self> {
        Self::new(
            self.xs.select_rows(idx),
            idx.iter().map(|&i| self.ys[i]).collect(),
            self.num_classes,
            name,
        )
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &i in idx {
            c[self.ys[i]] += 1;
        }
        c
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Decode an IDX3 image file into an `n x (rows*cols)` matrix scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Mat64> {
    if be_u32(bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Idx("wrong magic for images".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Idx("dimension overflow".into()))?;
    let total = n
        .checked_mul(dim)
        .and_then(|t| t.checked_add(16))
        .ok_or_else(|| Error::Idx("dimension overflow".into()))?;
    if n == 0 || dim == 0 {
        return Err(Error::Idx("empty dataset".into()));
    }
    if bytes.len() < total {
        return Err(Error::Idx(format!(
            "truncated payload: need {total} bytes, have {}",
            bytes.len()
        )));
    }
    if bytes.len() > total {
        return Err(Error::Idx("trailing bytes after payload".into()));
    }
    let data = bytes[16..total]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Mat64::new(n, dim, data)
}

/// Decode an IDX1 label file. `max_classes` rejects out-of-range labels.
pub fn parse_idx_labels(bytes: &[u8], max_classes: Option<usize>) -> Result<Vec<usize>> {
    if be_u32(bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Idx("wrong magic for labels".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    if n == 0 {
        return Err(Error::Idx("empty dataset".into()));
    }
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Idx(format!(
            "count mismatch: header says {n}, payload has {}",
            payload.len()
        )));
    }
    let labels: Vec<usize> = payload.iter().map(|&b| b as usize).collect();
    if let Some(c) = max_classes {
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Idx(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
    }
    Ok(labels)
}

/// Encode a matrix with entries in `[0, 1]` as an IDX3 image file.
pub fn write_idx_images(m: &Mat64, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != m.cols() {
        return Err(invalid("rows*cols", "must equal matrix width"));
    }
    let mut out = Vec::with_capacity(16 + m.as_slice().len());
    for v in [IDX_IMAGES_MAGIC, m.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        m.as_slice()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&y| y as u8));
    out
}

/// Load `{prefix}-images-idx3-ubyte` / `{prefix}-labels-idx1-ubyte` from `dir`.
pub fn load_idx_split(dir: &Path, prefix: &str, num_classes: usize) -> Result<Dataset> {
    let read = |suffix: &str| {
        let p = dir.join(format!("{prefix}-{suffix}"));
        std::fs::read(&p).map_err(|e| Error::Idx(format!("{}: {e}", p.display())))
    };
    let xs = parse_idx_images(&read("images-idx3-ubyte")?)?;
    let ys = parse_idx_labels(&read("labels-idx1-ubyte")?, Some(num_classes))?;
    if xs.rows() != ys.len() {
        return Err(Error::Idx(format!(
            "{prefix}: {} images but {} labels",
            xs.rows(),
            ys.len()
        )));
    }
    Dataset::new(xs, ys, num_classes, format!("{}/{prefix}", dir.display()))
}

/// Fashion-MNIST style directory: `train-*` and `t10k-*` files.
pub fn load_fashion_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_idx_split(dir, "train", 10)?,
        load_idx_split(dir, "t10k", 10)?,
    ))
}

/// `C` Gaussian clusters in `[0, 1]^d`, labels balanced to within one.
pub fn synth_blobs(
    rng: &mut RngStream,
    n: usize,
    d: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(invalid(
            "n",
            format!("need n >= C >= 2 (n={n}, C={classes})"),
        ));
    }
    if d == 0 {
        return Err(invalid("d", "must be >= 1"));
    }
    if !(spread > 0.0) {
        return Err(invalid("spread", "must be > 0"));
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| rng.uniform(d).into_iter().map(|u| 0.2 + 0.6 * u).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &means[c] {
            data.push((m + spread * rng.next_normal()).clamp(0.0, 1.0));
        }
        ys.push(c);
    }
    Dataset::new(Mat64::new(n, d, data)?, ys, classes, "synth_blobs")
}

/// Per-client disjoint index lists into one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Every index valid and used at most once.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for shard in &self.client_indices {
            for &i in shard {
                if i >= n {
                    return Err(Error::Partition(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }
}

/// Random permutation split into `k` shards whose sizes differ by at most one.
pub fn partition_iid(rng: &mut RngStream, n: usize, k: usize) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if k > n {
        return Err(Error::Partition(format!("{k} clients for {n} samples")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    Ok(Partition {
        client_indices: split_even(&perm, k),
    })
}

fn split_even(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(items[at..at + len].to_vec());
        at += len;
    }
    out
}

fn indices_by_class(ds: &Dataset, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.ys.iter().enumerate() {
        by[y].push(i);
    }
    for v in &mut by {
        rng.shuffle(v);
    }
    by
}

/// Each client receives two class slots, so it holds at most two labels.
///
/// The `2K` slots are dealt to classes round-robin after a random shuffle;
/// each class's samples are split evenly over its slots.
pub fn partition_two_class(rng: &mut RngStream, ds: &Dataset, k: usize) -> Result<Partition> {
    let c = ds.num_classes;
    if k == 0 || 2 * k < c {
        return Err(Error::Partition(format!(
            "two-class split infeasible: {k} clients for {c} classes"
        )));
    }
    let by_class = indices_by_class(ds, rng);
    let mut slots: Vec<usize> = (0..2 * k).collect();
    rng.shuffle(&mut slots);
    // slot_class[s] = class of slot s
    let mut slot_class = vec![0; 2 * k];
    let mut class_slots = vec![Vec::new(); c];
    for (pos, &s) in slots.iter().enumerate() {
        slot_class[s] = pos % c;
        class_slots[pos % c].push(s);
    }
    let mut slot_items = vec![Vec::new(); 2 * k];
    for (cls, owned) in class_slots.iter().enumerate() {
        for (s, chunk) in owned.iter().zip(split_even(&by_class[cls], owned.len())) {
            slot_items[*s] = chunk;
        }
    }
    let client_indices = (0..k)
        .map(|i| {
            let mut v = std::mem::take(&mut slot_items[2 * i]);
            v.extend(std::mem::take(&mut slot_items[2 * i + 1]));
            v
        })
        .collect();
    Ok(Partition { client_indices })
}

/// Maximum redraws when a Dirichlet split leaves a client empty.
pub const DIRICHLET_RETRIES: usize = 100;

/// Per-class proportions over clients drawn from `Dirichlet(alpha)`.
pub fn partition_dirichlet(
    rng: &mut RngStream,
    ds: &Dataset,
    k: usize,
    alpha: f64,
) -> Result<Partition> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid("alpha", "must be > 0"));
    }
    if k == 0 || k > ds.len() {
        return Err(Error::Partition(format!(
            "{k} clients for {} samples",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid("alpha", e.to_string()))?;
    for _ in 0..DIRICHLET_RETRIES {
        let by_class = indices_by_class(ds, rng);
        let mut shards = vec![Vec::new(); k];
        for items in &by_class {
            let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let total: f64 = g.iter().sum();
            let n = items.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (client, gi) in g.iter().enumerate() {
                cum += gi;
                let end = if client + 1 == k {
                    n
                } else {
                    (((cum / total) * n as f64).floor() as usize).clamp(start, n)
                };
                shards[client].extend_from_slice(&items[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(Partition {
                client_indices: shards,
            });
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet draw without empty shards after {DIRICHLET_RETRIES} retries"
    )))
}

/// Split a local shard into (train, validation); validation is the last 20%.
pub fn split_validation(shard: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n_val = if shard.len() >= 2 {
        ((shard.len() as f64) * 0.2).round().max(1.0) as usize
    } else {
        0
    };
    let cut = shard.len() - n_val;
    (shard[..cut].to_vec(), shard[cut..].to_vec())
}
