//! Dense N-D tensors over f32/f64 with an optional gradient slot.
//!
//! Layout is always contiguous row-major. Tensors are cheap to clone (the
//! payload is shared behind an `Arc`) and immutable once built; the only
//! mutation paths are `data_mut` (copy-on-write, used by the optimizer) and
//! gradient accumulation through the tape.

pub(crate) mod kernels;
mod ops;
mod tape;

pub use ops::*;
pub use tape::{GradCell, NodeId, Tape};

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Runtime tag for the two supported element types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::F64 => write!(f, "float64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` (training default) and
/// `f64` (gradient-check and oracle paths).
pub trait Element:
    Copy
    + Send
    + Sync
    + 'static
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline(always)]
            fn minv(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                self * a + b
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);

/// Dense row-major tensor. `node` is set while the tensor is an intermediate
/// of an active tape; `grad` is set for leaves built with `requires_grad`.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    pub(crate) node: Option<NodeId>,
    pub(crate) grad: Option<Arc<GradCell<E>>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::ZERO; numel]), node: None, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None, grad: None }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None, grad: None }
    }

    /// Mark this tensor as a differentiable leaf: attaches an (empty) gradient
    /// slot that backward passes accumulate into.
    pub fn requires_grad(mut self) -> Self {
        if self.grad.is_none() {
            self.grad = Some(Arc::new(GradCell::new(self.numel())));
        }
        self
    }

    pub fn is_leaf(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    /// Copy-on-write mutable access; used by the optimizer and loaders.
    pub fn data_mut(&mut self) -> &mut Vec<E> {
        Arc::make_mut(&mut self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Snapshot of the accumulated gradient, if any has been written.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad.as_ref().and_then(|c| c.snapshot())
    }

    /// Take the accumulated gradient, leaving the slot empty.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.grad.as_ref().and_then(|c| c.take())
    }

    pub fn zero_grad(&self) {
        if let Some(c) = &self.grad {
            c.clear();
        }
    }

    /// True when an op consuming this tensor must be recorded.
    pub(crate) fn tracked(&self) -> bool {
        self.node.is_some() || self.grad.is_some()
    }

    pub(crate) fn sink(&self) -> tape::Sink<E> {
        match (self.node, &self.grad) {
            (Some(id), _) => tape::Sink::Node(id),
            (None, Some(cell)) => tape::Sink::Leaf(Arc::clone(cell)),
            (None, None) => tape::Sink::Discard,
        }
    }

    /// Same data viewed under a different shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        let mut out = self.clone();
        out.shape = shape;
        Ok(out)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Debug-build guard: forward ops must not introduce NaN/Inf from finite
/// inputs.
#[inline]
pub(crate) fn debug_check_finite<E: Element>(op: &'static str, data: &[E]) {
    #[cfg(debug_assertions)]
    {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            panic!("{op}: non-finite value {bad} in forward output");
        }
    }
    #[cfg(not(debug_assertions))]
    {
        let _ = (op, data);
    }
}
