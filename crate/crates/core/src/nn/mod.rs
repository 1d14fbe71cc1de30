//! Layer primitives: pointwise/depthwise convolution, layer normalization,
//! bilinear resize, and the unfold/fold bridge between 2-D maps and token
//! sequences.

mod conv;
mod norm;
mod resize;

pub use conv::{conv2d, Conv2d};
pub use norm::{layer_norm, LayerNorm};
pub use resize::bilinear_resize;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// Truncated-normal init (std given, clipped at two standard deviations).
pub fn trunc_normal<E: Element, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(E::from_f64(v));
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}

/// N x C x H x W -> N x C x (H*W); token order is row-major (left to right,
/// top to bottom), which is exactly the memory layout, so this is a reshape.
pub fn unfold<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("unfold", format!("expected rank-4 input, got {:?}", s)));
    }
    x.reshaped(vec![s[0], s[1], s[2] * s[3]])
}

/// Inverse of `unfold`; errors when `h * w` does not match the token count.
pub fn fold<E: Element>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid("fold", format!("expected rank-3 input, got {:?}", s)));
    }
    if s[2] != h * w {
        return Err(Error::invalid(
            "fold",
            format!("token count {} does not match {}x{}", s[2], h, w),
        ));
    }
    x.reshaped(vec![s[0], s[1], h, w])
}

/// Row-major token index of pixel (row, col) in an h x w map.
pub fn token_index(row: usize, col: usize, w: usize) -> usize {
    row * w + col
}

/// GELU wrapper kept next to the layers that use it.
pub fn gelu<E: Element>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    crate::tensor::gelu(tape, x)
}
