use super::{RefNetParams, Real};
use crate::error::{Error, Result};

/// Adam optimizer state: moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: RefNetParams<T>,
    pub second_moment: RefNetParams<T>,
    /// Number of completed steps.
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &RefNetParams<T>, lr: f64) -> Result<Self> {
        Ok(Self {
            first_moment: RefNetParams::zeros(like.arch)?,
            second_moment: RefNetParams::zeros(like.arch)?,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    mut params: RefNetParams<T>,
    grads: &RefNetParams<T>,
    mut state: AdamState<T>,
) -> Result<(RefNetParams<T>, AdamState<T>)> {
    if grads.arch != params.arch || state.first_moment.arch != params.arch {
        return Err(Error::shape("adam", "parameter, gradient and state shapes differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    let groups = params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(state.first_moment.groups_mut())
        .zip(state.second_moment.groups_mut());
    for (((p, g), m), v) in groups {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((p, &g), m), v) in it {
            let g = g.f64();
            let m_new = b1 * m.f64() + (1.0 - b1) * g;
            let v_new = b2 * v.f64() + (1.0 - b2) * g * g;
            *m = T::of(m_new);
            *v = T::of(v_new);
            let m_hat = m_new / bias1;
            let v_hat = v_new / bias2;
            *p = T::of(p.f64() - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok((params, state))
}
