use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor in `(N, C, H, W)` order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let d = self.0;
        [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.strides();
        n * s[0] + c * s[1] + h * s[2] + w * s[3]
    }

    pub fn with_axis(mut self, axis: usize, extent: usize) -> Self {
        self.0[axis] = extent;
        self
    }

    /// Numpy-style broadcast of two shapes: each axis must agree or be 1.
    pub fn broadcast(a: Shape, b: Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = match (a.0[i], b.0[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
                }
            };
        }
        Ok(Shape(out))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "[{n}, {c}, {h}, {w}]")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d)
    }
}

/// Dense rank-4 tensor.
///
/// Storage is shared and immutable; cloning is cheap and a `Tensor` can be
/// sent across threads. Values are held as `f64` so the same kernels serve
/// both the 32-bit production path (values rounded to `f32` after every op
/// by the tape) and the 64-bit gradient-check path.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: data.into() })
    }

    pub(crate) fn new_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data: data.into() }
    }

    pub fn from_f32(shape: impl Into<Shape>, data: &[f32]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        Tensor { shape, data: vec![value; shape.numel()].into() }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let [nn, cc, hh, ww] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..nn {
            for c in 0..cc {
                for h in 0..hh {
                    for w in 0..ww {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data: data.into() }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.0
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// The single value of a `[1,1,1,1]` tensor (or the first value otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum in fixed left-to-right order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |acc: f64, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Bitwise equality of the stored values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copy of sample `n` as a `[1, C, H, W]` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape.0;
        let len = c * h * w;
        Tensor::new_unchecked(Shape::new(1, c, h, w), self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks `[1, C, H, W]` (or `[k, C, H, W]`) tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let [_, c, h, w] = first.dims();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, ph, pw] = p.dims();
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape(format!("stack: {:?} vs {:?}", p.shape, first.shape)));
            }
            n += pn;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::new_unchecked(Shape::new(n, c, h, w), data))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<String> = self.data.iter().take(SHOW).map(|v| format!("{v:.5}")).collect();
        write!(f, "[{}", head.join(", "))?;
        if self.numel() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// A complex-valued tensor held as two real planes of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub real: Tensor,
    pub imag: Tensor,
}

impl ComplexTensor {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::shape(format!(
                "complex planes differ: {:?} vs {:?}",
                real.shape(),
                imag.shape()
            )));
        }
        Ok(ComplexTensor { real, imag })
    }

    pub fn shape(&self) -> Shape {
        self.real.shape()
    }

    /// Elementwise magnitude.
    pub fn magnitude(&self) -> Tensor {
        self.real.zip_map(&self.imag, |a, b| (a * a + b * b).sqrt()).expect("matching planes")
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .fold(0.0, |acc, (a, b)| acc + a * a + b * b)
    }
}
