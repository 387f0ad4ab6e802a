//! Small CPU neural-network toolkit: a reverse-mode tape over dense NCHW
//! tensors, convolution/attention layers, a conditional UNet and Adam.
//!
//! Everything is generic over [`Real`] so the same model can be trained in
//! `f32` and gradient-checked in `f64`.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod unet;

pub use graph::{Grads, Graph, Var};
pub use layers::{sinusoidal_embedding, Conv2d, Init, Linear, ParamRecord, ParamStore, ResBlock, SelfAttention};
pub use optim::{clip_grad_norm, Adam, AdamConfig, AdamState};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{UNet, UNetConfig};
