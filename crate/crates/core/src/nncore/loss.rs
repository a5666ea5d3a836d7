use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-label positive-class weights for the weighted logistic loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub pos_weights: Vec<f64>,
}

impl LossConfig {
    pub fn new(pos_weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = pos_weights.iter().find(|w| !(1.0..=100.0).contains(*w)) {
            return Err(Error::invalid(format!("positive weight {w} outside [1, 100]")));
        }
        Ok(Self { pos_weights })
    }

    pub fn uniform(labels: usize) -> Self {
        Self {
            pos_weights: vec![1.0; labels],
        }
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on logits, averaged over all `N·L` cells.
///
/// Each cell contributes `w·y·softplus(−z) + (1−y)·softplus(z)`. Returns the
/// loss and its gradient with respect to the logits.
pub fn weighted_bce_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    let dims = logits.dims();
    if dims.len() != 2 || targets.dims() != dims {
        return Err(Error::shape(
            "loss",
            format!("logits {:?} vs targets {:?}", dims, targets.dims()),
        ));
    }
    let labels = dims[1];
    if cfg.pos_weights.len() != labels {
        return Err(Error::shape(
            "loss",
            format!("{} weights for {} labels", cfg.pos_weights.len(), labels),
        ));
    }
    let count = logits.len();
    if count == 0 {
        return Err(Error::shape("loss", "empty batch"));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(count);
    for (i, (&z, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        let (z, y) = (z.f64(), y.f64());
        let w = cfg.pos_weights[i % labels];
        let (term, dz) = if y == 1.0 {
            (w * softplus(-z), w * (sigmoid(z) - 1.0))
        } else if y == 0.0 {
            (softplus(z), sigmoid(z))
        } else {
            return Err(Error::invalid(format!("non-binary target {y} at cell {i}")));
        };
        total += term;
        grad.push(T::of(dz * scale));
    }
    Ok((total * scale, Tensor::new(dims.to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_logit_positive() {
        let (loss, _) = weighted_bce_logits(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0]), &LossConfig::uniform(1)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let cfg = LossConfig::new(vec![3.0]).unwrap();
        let (loss, _) = weighted_bce_logits(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0]), &cfg).unwrap();
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn two_cell_reference_value() {
        // mean(2·softplus(−2), softplus(−1)), evaluated with mpmath at 50 digits
        let cfg = LossConfig::new(vec![2.0, 1.0]).unwrap();
        let (loss, _) = weighted_bce_logits(&t(&[1, 2], &[2.0, -1.0]), &t(&[1, 2], &[1.0, 0.0]), &cfg).unwrap();
        assert!((loss - 0.283_558_854_802_083_9).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn non_binary_target_rejected() {
        let err = weighted_bce_logits(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[0.5]), &LossConfig::uniform(1));
        assert!(err.is_err());
    }

    #[test]
    fn weights_outside_range_rejected() {
        assert!(LossConfig::new(vec![0.5]).is_err());
        assert!(LossConfig::new(vec![101.0]).is_err());
    }

    #[test]
    fn finite_for_huge_logits() {
        let cfg = LossConfig::uniform(2);
        let (loss, g) = weighted_bce_logits(&t(&[2, 2], &[1e4, -1e4, -1e4, 1e4]), &t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), &cfg).unwrap();
        assert!(loss.is_finite() && g.is_finite());
        assert!((loss - (1e4 + 1e4) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_gradient_matches_central_difference() {
        let cfg = LossConfig::new(vec![2.5]).unwrap();
        for &(z, y) in &[(0.3, 1.0), (-1.7, 0.0), (4.0, 1.0), (-0.2, 1.0), (2.2, 0.0)] {
            let f = |z: f64| weighted_bce_logits(&t(&[1, 1], &[z]), &t(&[1, 1], &[y]), &cfg).unwrap().0;
            let h = 1e-5;
            let numeric = (f(z + h) - f(z - h)) / (2.0 * h);
            let (_, g) = weighted_bce_logits(&t(&[1, 1], &[z]), &t(&[1, 1], &[y]), &cfg).unwrap();
            let analytic = g.data()[0];
            assert!((analytic - numeric).abs() / analytic.abs().max(1e-12) < 1e-6);
        }
    }
}
