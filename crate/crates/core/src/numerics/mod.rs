//! Dense tensors with reverse-mode differentiation, Adam, and a seeded RNG.

mod adam;
mod autograd;
mod ops;
mod params;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use autograd::{backward, grad, Gradients};
pub use ops::LAYER_NORM_EPS;
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::{check_mode, is_check_mode, is_grad_enabled, no_grad, set_finite_checks, CheckModeGuard, NoGradGuard, Tensor};
