//! Baseline attacks: label flipping, Gaussian and zero updates, FGSM data
//! poisoning. Attack configuration for the sampler attacks lives here too.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::Model;
use crate::numkit::{Mat64, ParamVector, RngStream, Vec64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttackKind {
    #[default]
    None,
    LFA,
    GA,
    ZA,
    AA,
    TopK,
    Meta,
    LossOrder,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "None",
            AttackKind::LFA => "LFA",
            AttackKind::GA => "GA",
            AttackKind::ZA => "ZA",
            AttackKind::AA => "AA",
            AttackKind::TopK => "TopK",
            AttackKind::Meta => "Meta",
            AttackKind::LossOrder => "LossOrder",
        }
    }

    /// Attacks that change which samples are trained on but not the data.
    pub fn is_sampler(self) -> bool {
        matches!(
            self,
            AttackKind::TopK | AttackKind::Meta | AttackKind::LossOrder
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub source_class: usize,
    pub target_class: usize,
    pub ga_variance: f64,
    #[serde(rename = "fgsm_ε", alias = "fgsm_eps")]
    pub fgsm_eps: f64,
    #[serde(rename = "κ", alias = "kappa")]
    pub kappa: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            source_class: 0,
            target_class: 1,
            ga_variance: 10.0,
            fgsm_eps: 0.1,
            kappa: 2,
        }
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(kind: AttackKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_class == self.target_class {
            return Err(invalid("target_class", "must differ from source_class"));
        }
        if !(self.ga_variance >= 0.0) || !self.ga_variance.is_finite() {
            return Err(invalid("ga_variance", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fgsm_eps) {
            return Err(invalid("fgsm_ε", "must lie in [0, 1]"));
        }
        if self.kappa == 0 {
            return Err(invalid("κ", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn flip_labels(labels: &[usize], source: usize, target: usize) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| if y == source { target } else { y })
        .collect()
}

/// Each coordinate drawn from `Normal(mean_i, variance)`.
pub fn gaussian_update(rng: &mut RngStream, mean: &[f64], variance: f64) -> Result<ParamVector> {
    if !(variance >= 0.0) {
        return Err(invalid("variance", "must be >= 0"));
    }
    let sd = variance.sqrt();
    Ok(Vec64(
        mean.iter().map(|m| m + sd * rng.next_normal()).collect(),
    ))
}

pub fn zero_update(dim: usize) -> ParamVector {
    Vec64::zeros(dim)
}

/// `clamp(x + eps * sign(grad_x loss), 0, 1)` for every row in `idx`; the
/// returned matrix holds the perturbed rows in `idx` order.
pub fn fgsm_poison(
    model: &Model,
    xs: &Mat64,
    ys: &[usize],
    idx: &[usize],
    eps: f64,
) -> Result<Mat64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(invalid("fgsm_ε", "must lie in [0, 1]"));
    }
    let cols = xs.cols();
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        let x = xs.row(i);
        if eps == 0.0 {
            out.extend_from_slice(x);
            continue;
        }
        let g = model.input_grad(x, ys[i])?;
        out.extend(x.iter().zip(&g).map(|(v, d)| {
            let step = if *d > 0.0 {
                eps
            } else if *d < 0.0 {
                -eps
            } else {
                0.0
            };
            (v + step).clamp(0.0, 1.0)
        }));
    }
    Mat64::new(idx.len(), cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_blobs;
    use crate::models::ModelSpec;

    #[test]
    fn flip_examples() {
        assert_eq!(flip_labels(&[0, 1, 0, 2], 0, 1), vec![1, 1, 1, 2]);
        assert_eq!(flip_labels(&[2, 3], 0, 1), vec![2, 3]);
        let once = flip_labels(&[0, 1, 0, 2], 0, 1);
        assert_eq!(flip_labels(&once, 0, 1), once);
    }

    #[test]
    fn gaussian_update_examples() {
        let mut rng = RngStream::new(1, 0);
        let mean = [0.5, -1.0, 2.0];
        assert_eq!(
            gaussian_update(&mut rng, &mean, 0.0).unwrap().0,
            mean.to_vec()
        );
        assert_eq!(AttackConfig::default().ga_variance, 10.0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| gaussian_update(&mut rng, &[3.0], 10.0).unwrap()[0])
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((v - 10.0).abs() < 0.5, "sample variance {v}");
        assert!(gaussian_update(&mut rng, &mean, -1.0).is_err());
    }

    #[test]
    fn zero_update_has_zero_norm() {
        assert_eq!(zero_update(17).norm(), 0.0);
    }

    #[test]
    fn fgsm_examples() {
        let mut rng = RngStream::new(2, 0);
        let ds = synth_blobs(&mut rng, 200, 6, 3, 0.1).unwrap();
        let mut m = Model::init(ModelSpec::lr(6, 3).unwrap(), &mut rng).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        for _ in 0..20 {
            let g = m.grad_indices(&ds.xs, &ds.ys, &idx).unwrap();
            m.sgd_step(&g, 0.5).unwrap();
        }
        let same = fgsm_poison(&m, &ds.xs, &ds.ys, &idx, 0.0).unwrap();
        assert_eq!(same, ds.xs);
        let eps = 0.05;
        let adv = fgsm_poison(&m, &ds.xs, &ds.ys, &idx, eps).unwrap();
        let mut increased = 0;
        for (r, &i) in idx.iter().enumerate() {
            let x = ds.xs.row(i);
            let xa = adv.row(r);
            assert!(x.iter().zip(xa).all(|(a, b)| (a - b).abs() <= eps + 1e-15));
            assert!(xa.iter().all(|v| (0.0..=1.0).contains(v)));
            if m.sample_loss(xa, ds.ys[i]).unwrap() >= m.sample_loss(x, ds.ys[i]).unwrap() {
                increased += 1;
            }
        }
        assert!(increased as f64 >= 0.9 * idx.len() as f64);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            target_class: 0,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AttackConfig {
            fgsm_eps: 1.5,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
