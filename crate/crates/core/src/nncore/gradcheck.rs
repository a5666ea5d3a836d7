//! Central finite-difference gradient checks.
//!
//! Analytic gradients are computed at the network's own precision; the
//! numeric derivative is always taken on an `f64` copy of the parameters.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, forward_with_frozen_gates, weighted_bce_logits, LossConfig, Mode, Real, RefNetParams, Tensor, PARAM_GROUPS};
use crate::error::{Error, Result};

/// Coordinates sampled per parameter group (all of them when the group is smaller).
const PER_GROUP: usize = 40;
/// Minimum coordinates checked; small networks fall back to every coordinate.
const MIN_COORDINATES: usize = 200;
/// Magnitude below which relative error is measured against this floor instead.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub group: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<Discrepancy>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `f` at the listed coordinates.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// How loss evaluations treat the network's non-smooth points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kinks {
    /// Freeze ReLU gates, pooling choices and the dropout mask at the base
    /// point; the probed function is then smooth with the same gradient.
    Frozen,
    /// Re-run the plain forward pass; steps that cross a ReLU or pooling
    /// switch show up as error.
    Live,
}

/// Compares the network's backward pass against central differences of the
/// weighted loss over a seeded sample of coordinates from every group, with
/// activation kinks frozen at the base point.
pub fn finite_difference_check<T: Real>(
    params: &RefNetParams<T>,
    batch: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &LossConfig,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    finite_difference_check_with(params, batch, targets, cfg, step, seed, Kinks::Frozen)
}

/// [`finite_difference_check`] with explicit kink handling.
///
/// Training-mode dropout is used; in [`Kinks::Live`] mode the dropout stream
/// is reseeded for every evaluation so each one sees the same mask.
pub fn finite_difference_check_with<T: Real>(
    params: &RefNetParams<T>,
    batch: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &LossConfig,
    step: f64,
    seed: u64,
    kinks: Kinks,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mask_seed = seed ^ 0x5eed_d20f;
    let (logits, cache) = forward(params, batch, Mode::Train(&mut ChaCha8Rng::seed_from_u64(mask_seed)))?;
    let (_, upstream) = weighted_bce_logits(&logits, targets, cfg)?;
    let grads = backward(params, &cache, &upstream)?;

    let reference = params.cast::<f64>();
    let batch64 = batch.cast::<f64>();
    let targets64 = targets.cast::<f64>();
    let gates = cache.cast::<f64>();
    let loss_at = |p: &RefNetParams<f64>| -> Result<f64> {
        let logits = match kinks {
            Kinks::Frozen => forward_with_frozen_gates(p, &batch64, &gates)?,
            Kinks::Live => {
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                forward(p, &batch64, Mode::Train(&mut rng))?.0
            }
        };
        Ok(weighted_bce_logits(&logits, &targets64, cfg)?.0)
    };

    let total = params.num_params();
    let take_all = total <= MIN_COORDINATES
        || params.groups().iter().map(|g| g.len().min(PER_GROUP)).sum::<usize>() < MIN_COORDINATES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut probe = reference.clone();
    for (g, name) in PARAM_GROUPS.iter().enumerate() {
        let len = reference.groups()[g].len();
        let chosen: Vec<usize> = if take_all || len <= PER_GROUP {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, PER_GROUP).into_vec();
            v.sort_unstable();
            v
        };
        for i in chosen {
            let orig = reference.groups()[g].data()[i];
            probe.groups_mut()[g].data_mut()[i] = orig + step;
            let up = loss_at(&probe)?;
            probe.groups_mut()[g].data_mut()[i] = orig - step;
            let down = loss_at(&probe)?;
            probe.groups_mut()[g].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.groups()[g].data()[i].f64();
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Discrepancy {
                    group: name,
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_single_weight_model() {
        // logit = w·x for one cell, loss = weighted BCE
        let x = 0.8;
        let cfg = LossConfig::new(vec![4.0]).unwrap();
        let target = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let loss = |w: &[f64]| {
            let z = Tensor::new(vec![1, 1], vec![w[0] * x]).unwrap();
            weighted_bce_logits(&z, &target, &cfg).unwrap()
        };
        let w = [0.35];
        let (_, dz) = loss(&w);
        let analytic = [dz.data()[0] * x];
        let err = check_gradient(|p| loss(p).0, &w, &analytic, &[0], 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        assert!(check_gradient(|_| 0.0, &[0.0], &[0.0], &[0], 0.0).is_err());
    }
}
