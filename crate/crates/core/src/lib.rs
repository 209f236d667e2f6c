//! Contrastive reasoning on a small reverse-mode autodiff engine.
//!
//! A feed-forward classifier predicts `P`; for every class `i` the gradient
//! of a contrast loss with respect to the final weight row `i` answers
//! "why P, rather than i?". The concatenated gradients form a feature that
//! an MLP head classifies ([`head`]), and the same losses drive
//! contrastive Grad-CAM maps ([`explain`]).
//!
//! Everything is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); kernels accumulate in `f64` either way.

pub mod autodiff;
pub mod contrast;
mod error;
pub mod explain;
pub mod harness;
pub mod head;
pub mod nn;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use scalar::{argmax, narrow, widen, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Feature32 = contrast::ContrastiveFeature<f32>;
pub type Feature64 = contrast::ContrastiveFeature<f64>;
pub type Head32 = head::ContrastiveHead<f32>;
pub type Head64 = head::ContrastiveHead<f64>;
pub type Dataset32 = harness::Dataset<f32>;
pub type Dataset64 = harness::Dataset<f64>;
