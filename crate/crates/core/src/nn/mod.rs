//! A small CPU convolutional-network engine with hand-written backward passes.
//!
//! Everything operates on one sample at a time in channel-major (C×H×W)
//! layout; batching happens in [`crate::train`] by summing per-sample
//! gradients in a fixed order, which keeps results independent of the
//! number of worker threads.

mod gemm;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use layers::{Conv2d, ConvTranspose2x2, Linear};
pub use params::{Grads, ParamId, ParamSet};
pub use tensor::Tensor;
