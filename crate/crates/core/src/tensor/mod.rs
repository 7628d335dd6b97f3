//! Dense tensors and the reverse-mode tape built on top of them.
//!
//! Storage is generic over [`Scalar`] (`f32` by default, `f64` for the
//! high-precision checks). Every reduction and convolution accumulates in
//! `f64` regardless of the storage type.

mod gradcheck;
pub mod ops;
mod param;
mod tape;

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{invalid, shape_err, Error, Result};

pub use gradcheck::grad_check;
pub use param::Param;
pub use tape::{BackwardCtx, BackwardRule, Tape, Var};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NAME: &'static str;

    fn cast(v: f64) -> Self;
    fn wide(self) -> f64;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NAME: &'static str = $name;

            #[inline(always)]
            fn cast(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn wide(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Checked constructor: rejects length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec_unchecked(shape, data)?;
        t.check_finite()?;
        Ok(t)
    }

    /// Skips the finiteness scan but still validates the length.
    pub fn from_vec_unchecked(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n = numel(shape);
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::cast(v)).collect())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::ONE)
    }

    pub fn scalar(v: S) -> Self {
        Self::full(&[], v)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index].wide(),
            }),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[S]) {
        match &mut self.grad {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn get(&self, idx: &[usize]) -> S {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let i = flat_index(&self.shape, idx);
        self.data[i] = v;
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::cast(v.wide())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.wide()).collect()
    }

    /// Slice along axis 0: element `i` of the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return invalid(format!("index {i} out of range for shape {:?}", self.shape));
        }
        let inner = numel(&self.shape[1..]);
        Tensor::from_vec_unchecked(&self.shape[1..], self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return shape_err(format!("stack: {:?} vs {:?}", p.shape, first.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec_unchecked(&shape, data)
    }

    /// True when every element is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == S::ZERO || v == S::ONE)
    }

    pub fn mean_value(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.wide()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.wide().abs()))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    assert_eq!(shape.len(), idx.len(), "index rank mismatch");
    idx.iter()
        .zip(shape)
        .zip(strides(shape))
        .map(|((&i, &n), s)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            i * s
        })
        .sum()
}

/// Max absolute difference divided by the max magnitude of `reference`.
pub fn max_rel_error<S: Scalar, T: Scalar>(actual: &Tensor<S>, reference: &Tensor<T>) -> f64 {
    assert_eq!(actual.shape(), reference.shape(), "max_rel_error: shape mismatch");
    let diff = actual
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0f64, |m, (a, b)| m.max((a.wide() - b.wide()).abs()));
    let scale = reference.max_abs().max(f64::MIN_POSITIVE);
    diff / scale
}
