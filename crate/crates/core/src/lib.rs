//! RWKV-UNet: a U-shaped segmentation network whose encoder mixes inverted
//! residual convolution blocks with RWKV linear attention (bidirectional WKV
//! over pixel tokens), plus a cross-channel-mix module on the skip paths.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff, the layer
//! zoo, the three model variants, losses and metrics, an AdamW trainer, a
//! synthetic dataset generator, and a static parameter/MAC auditor. The
//! `rwkv-unet` binary exposes training, inference, auditing, gradient checks,
//! data generation and a scaling benchmark.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kvconfig;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rwkv;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tape, Tensor};
