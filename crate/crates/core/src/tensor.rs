//! Dense row-major tensors.
//!
//! A [`Tensor`] is a flat buffer plus a shape. It carries no gradient
//! state of its own; differentiation happens on a [`Tape`](crate::tape::Tape),
//! which records operations over tensors and hands back gradients keyed by
//! the variables it created.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

/// Floating point element type usable in tensors.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// The adjacent representable value in the direction of `target`.
    fn step_toward(self, target: Self) -> Self;

    /// `C ← α·A·B + β·C` on strided `m×k`, `k×n`, `m×n` matrices.
    ///
    /// # Safety
    /// Every element addressed through the given strides must lie inside
    /// the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Float32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() || target.is_nan() {
            return self;
        }
        if self == 0.0 {
            let tiny = f32::from_bits(1);
            return if target > 0.0 { tiny } else { -tiny };
        }
        let bits = self.to_bits();
        let away_from_zero = (target > self) == (self > 0.0);
        f32::from_bits(if away_from_zero { bits + 1 } else { bits - 1 })
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Float64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() || target.is_nan() {
            return self;
        }
        if self == 0.0 {
            let tiny = f64::from_bits(1);
            return if target > 0.0 { tiny } else { -tiny };
        }
        let bits = self.to_bits();
        let away_from_zero = (target > self) == (self > 0.0);
        f64::from_bits(if away_from_zero { bits + 1 } else { bits - 1 })
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "shape {shape:?} needs {expected} elements, buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `[N, C, H, W]` extents; errors for any other rank.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        // `v - v` is 0 for finite v and NaN otherwise; lanes keep it vectorizable.
        let mut lanes = [T::zero(); 8];
        let mut chunks = self.data.chunks_exact(8);
        for c in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l = *l + (v - v);
            }
        }
        let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + (v - v));
        lanes.iter().fold(tail, |a, &l| a + l) == T::zero()
    }

    /// Sequential row-major sum.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Copies of the samples at `indices` along the leading axis.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::shape("gather_rows", "scalar tensor has no rows"));
        };
        let row: usize = rest.iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of range for {n} rows"),
                ));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Mean over axis 1 of an `[N, C, H, W]` tensor, keeping the axis.
    pub fn mean_channels(&self) -> Result<Self> {
        let [n, c, h, w] = self.dims4("mean_channels")?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(c as f64);
        let mut out = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let src = &self.data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        Ok(Self {
            shape: vec![n, 1, h, w],
            data: out,
        })
    }

    /// Mean over the leading axis, keeping it with extent 1.
    pub fn mean_rows(&self) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::shape("mean_rows", "scalar tensor has no rows"));
        };
        if n == 0 {
            return Err(Error::shape("mean_rows", "zero rows"));
        }
        let row: usize = rest.iter().product();
        let mut out = vec![T::zero(); row];
        for r in 0..n {
            for (d, &v) in out.iter_mut().zip(&self.data[r * row..(r + 1) * row]) {
                *d = *d + v;
            }
        }
        let inv = T::one() / T::from_f64(n as f64);
        for d in out.iter_mut() {
            *d = *d * inv;
        }
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: out })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
