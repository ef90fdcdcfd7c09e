//! Hierarchical multi-head self-attention (H-MHSA) and the HAT-Net family of
//! vision backbones, on a small deterministic tensor library with
//! reverse-mode gradients.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, WeightsError};
pub use tensor::{Activation, Float, GradTape, Tensor, Var};
