//! Tensor maths, the reference network, the weighted loss, Adam and a
//! finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod loss;
mod refnet;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{
    check_gradient, finite_difference_check, finite_difference_check_with, relative_error, Kinks, Discrepancy, GradCheckReport};
pub use loss::{sigmoid, softplus, weighted_bce_logits, LossConfig};
pub use refnet::{
    backward, forward, forward_with_frozen_gates, head_from_tap, tap_gradient, ForwardCache, Mode, RefNetArch, RefNetParams, PARAM_GROUPS,
};
pub use scalar::Real;
pub use tensor::Tensor;
