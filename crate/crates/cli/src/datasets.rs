//! Offline validation of a Fashion-MNIST directory.

use std::path::Path;

use fsp_core::dataio::{parse_idx_images, parse_idx_labels};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

/// `(prefix, expected rows)` for the two splits.
pub const SPLITS: [(&str, usize); 2] = [("train", 60_000), ("t10k", 10_000)];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SplitCheck {
    pub split: String,
    pub images: usize,
    pub labels: usize,
    pub class_counts: Vec<usize>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn bad_file(path: &Path, reason: impl std::fmt::Display) -> CliError {
    CliError::io(
        path,
        std::io::Error::new(std::io::ErrorKind::InvalidData, reason.to_string()),
    )
}

/// Check magic numbers, shapes, label range and row counts of every file.
pub fn fetch_check(dir: &Path) -> Result<Vec<SplitCheck>> {
    let mut out = Vec::with_capacity(SPLITS.len());
    for (prefix, expected) in SPLITS {
        let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        let xs = parse_idx_images(&read(&ip)?).map_err(|e| bad_file(&ip, e))?;
        let ys = parse_idx_labels(&read(&lp)?, Some(NUM_CLASSES)).map_err(|e| bad_file(&lp, e))?;
        if xs.cols() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(bad_file(
                &ip,
                format!("expected 28x28 images, got {} pixels", xs.cols()),
            ));
        }
        if xs.rows() != expected {
            return Err(bad_file(
                &ip,
                format!("expected {expected} images, got {}", xs.rows()),
            ));
        }
        if ys.len() != expected {
            return Err(bad_file(
                &lp,
                format!("expected {expected} labels, got {}", ys.len()),
            ));
        }
        let mut class_counts = vec![0; NUM_CLASSES];
        for &y in &ys {
            class_counts[y] += 1;
        }
        out.push(SplitCheck {
            split: prefix.to_string(),
            images: xs.rows(),
            labels: ys.len(),
            class_counts,
        });
    }
    Ok(out)
}
