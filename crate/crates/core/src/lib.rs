//! Multivariate time-series generation with a masked-attention denoising
//! diffusion model, an autoregressive supervisor, a Wasserstein critic and an
//! MMD alignment loss, plus the usual evaluation suite.

pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
