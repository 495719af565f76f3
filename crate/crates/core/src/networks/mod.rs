//! The masked-attention transformer and its three specializations, plus the
//! GRU used by the evaluation metrics.

mod gru;
mod transformer;

pub use gru::{GruHead, GruNetwork};
pub use transformer::{causal_mask, MaskedTransformer, ModelKind, TransformerConfig, MASK_VALUE};

use crate::error::Result;
use crate::numerics::{Rng, Tensor};

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub(crate) fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}
