//! Desk-scale laboratory for studying unified next-token supervision over
//! text and residual-quantized visual tokens in a tiny vision-language
//! model. Everything is 64-bit, single-threaded and bitwise reproducible
//! from a seed.

pub mod data;
pub mod encoder;
pub mod lvlm;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod visual_head;
pub mod vq;

pub use tensor::{grad_check, NoGradGuard, Tensor, TensorError};
