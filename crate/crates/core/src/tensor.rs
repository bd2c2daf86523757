//! Dense rank-4 tensors and convolution kernels.
//!
//! Layout is NCHW, row-major, with `W` varying fastest. Everything is generic over
//! [`Real`] so the same code runs in `f32` for training and in `f64` for the
//! gradient and equivalence suites.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point scalar used throughout the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Dims4 { c, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("tensor dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Batch of feature maps with an optional same-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: Dims4, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor4 { dims, data, grad: None })
    }

    /// Panics on zero dims; use [`Tensor4::new`] for unchecked input.
    pub fn zeros(dims: Dims4) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Dims4, value: T) -> Self {
        dims.validate().expect("positive dims");
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
            grad: None,
        }
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        let i = t.offset(n, c, y, x);
                        t.data[i] = f(n, c, y, x);
                    }
                }
            }
        }
        t
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: Dims4, std: f64, rng: &mut R) -> Self {
        let data = (0..dims.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(dims, data).expect("positive dims")
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// The `H×W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.dims.c * self.dims.plane();
        &self.data[n * s..(n + 1) * s]
    }

    /// Copies channels `start..start + len` into a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.dims.c {
            return Err(Error::shape(format!(
                "channel range {start}..{} outside {} channels",
                start + len,
                self.dims.c
            )));
        }
        let dims = self.dims.with_c(len);
        let p = dims.plane();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            let base = (n * self.dims.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Self::new(dims, data)
    }

    /// Writes `src` into channels `start..start + src.c`.
    pub fn write_channels(&mut self, start: usize, src: &Self) -> Result<()> {
        let sd = src.dims;
        if sd.n != self.dims.n || sd.h != self.dims.h || sd.w != self.dims.w || start + sd.c > self.dims.c {
            return Err(Error::shape(format!(
                "cannot write {sd} into {} at channel {start}",
                self.dims
            )));
        }
        let p = sd.plane();
        for n in 0..sd.n {
            let dst = (n * self.dims.c + start) * p;
            self.data[dst..dst + sd.c * p].copy_from_slice(src.sample(n));
        }
        Ok(())
    }

    /// Adds `src` into channels `start..start + src.c`.
    pub fn add_channels(&mut self, start: usize, src: &Self) -> Result<()> {
        let sd = src.dims;
        if sd.n != self.dims.n || sd.h != self.dims.h || sd.w != self.dims.w || start + sd.c > self.dims.c {
            return Err(Error::shape(format!(
                "cannot add {sd} into {} at channel {start}",
                self.dims
            )));
        }
        let p = sd.plane();
        for n in 0..sd.n {
            let dst = (n * self.dims.c + start) * p;
            for (d, &s) in self.data[dst..dst + sd.c * p].iter_mut().zip(src.sample(n)) {
                *d = *d + s;
            }
        }
        Ok(())
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concatenation of zero tensors"))?;
        let c: usize = parts.iter().map(|t| t.dims.c).sum();
        let mut out = Self::zeros(first.dims.with_c(c));
        let mut at = 0;
        for part in parts {
            out.write_channels(at, part)?;
            at += part.dims.c;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Inner product of the data of two equally shaped tensors.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: None,
        }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("dims {} vs {}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// Convolution weights laid out as `(C_out, C_in, k_h, k_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize, data: Vec<T>) -> Result<Self> {
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "kernel dims must be positive, got ({c_out}, {c_in}, {kh}, {kw})"
            )));
        }
        if data.len() != c_out * c_in * kh * kw {
            return Err(Error::shape(format!(
                "kernel data length {} does not match ({c_out}, {c_in}, {kh}, {kw})",
                data.len()
            )));
        }
        Ok(ConvKernel {
            c_out,
            c_in,
            kh,
            kw,
            data,
            grad: None,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self::new(c_out, c_in, kh, kw, vec![T::zero(); c_out * c_in * kh * kw]).expect("positive dims")
    }

    /// Square kernel that maps every channel onto itself: a centered delta.
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut w = Self::zeros(channels, channels, k, k);
        for c in 0..channels {
            *w.at_mut(c, c, k / 2, k / 2) = T::one();
        }
        w
    }

    /// Zero-mean normal entries with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(c_out, c_in, k, k, data).expect("positive dims")
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Panics if `grad` does not match the kernel length.
    pub fn set_grad(&mut self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.data.len(), "kernel gradient length");
        self.grad = Some(grad);
    }

    /// Value and gradient buffers together, allocating the gradient if needed.
    pub fn value_and_grad(&mut self) -> (&mut [T], &mut [T]) {
        let len = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); len]);
        (&mut self.data, grad)
    }

    #[inline]
    pub fn offset(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.data[self.offset(co, ci, ky, kx)]
    }

    #[inline]
    pub fn at_mut(&mut self, co: usize, ci: usize, ky: usize, kx: usize) -> &mut T {
        let i = self.offset(co, ci, ky, kx);
        &mut self.data[i]
    }

    /// Copies input channels `start..start + len`.
    pub fn narrow_inputs(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.c_in {
            return Err(Error::shape(format!(
                "input-channel range {start}..{} outside {}",
                start + len,
                self.c_in
            )));
        }
        let mut out = Self::zeros(self.c_out, len, self.kh, self.kw);
        let block = self.kh * self.kw;
        for co in 0..self.c_out {
            let src = self.offset(co, start, 0, 0);
            let dst = out.offset(co, 0, 0, 0);
            out.data[dst..dst + len * block].copy_from_slice(&self.data[src..src + len * block]);
        }
        Ok(out)
    }

    /// Kernel equivalent to applying `self` and then `next`, both cross-correlations
    /// with zero padding on an unbounded plane.
    ///
    /// The result has `next.c_out` outputs, `self.c_in` inputs and spatial side
    /// `k_self + k_next - 1`: a full convolution of the two kernels contracted over
    /// the intermediate channels.
    pub fn then(&self, next: &Self) -> Result<Self> {
        if next.c_in != self.c_out {
            return Err(Error::shape(format!(
                "cannot compose kernel with {} outputs into kernel with {} inputs",
                self.c_out, next.c_in
            )));
        }
        let kh = self.kh + next.kh - 1;
        let kw = self.kw + next.kw - 1;
        let mut out = Self::zeros(next.c_out, self.c_in, kh, kw);
        for o in 0..next.c_out {
            for m in 0..self.c_out {
                for by in 0..next.kh {
                    for bx in 0..next.kw {
                        let b = next.at(o, m, by, bx);
                        if b == T::zero() {
                            continue;
                        }
                        for c in 0..self.c_in {
                            for ay in 0..self.kh {
                                for ax in 0..self.kw {
                                    let v = out.at_mut(o, c, ay + by, ax + bx);
                                    *v = *v + self.at(m, c, ay, ax) * b;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sums over the spatial taps, giving a `(C_out, C_in)` row-major matrix.
    pub fn spatial_sum(&self) -> Vec<T> {
        let block = self.kh * self.kw;
        self.data.chunks(block).map(|taps| taps.iter().copied().sum()).collect()
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            c_out: self.c_out,
            c_in: self.c_in,
            kh: self.kh,
            kw: self.kw,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: None,
        }
    }
}

/// A trainable vector or matrix with an always-present gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn filled(len: usize, v: T) -> Self {
        Self::new(vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
