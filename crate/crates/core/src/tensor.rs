//! Dense rank-4 NCHW tensors.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::rng::Prng;

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    /// Validated constructor: every dimension must be at least 1 and the
    /// element count must fit in `usize`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(shape_err!("all dimensions must be >= 1, got ({n}, {c}, {h}, {w})"));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .filter(|&len| len <= isize::MAX as usize)
            .ok_or_else(|| shape_err!("element count of ({n}, {c}, {h}, {w}) overflows"))?;
        Ok(Shape { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn index(&self, offset: usize) -> (usize, usize, usize, usize) {
        let w = offset % self.w;
        let rest = offset / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, h, w)
    }

    pub fn with_c(self, c: usize) -> Shape {
        Shape { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Shape {
        Shape { n, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Shape {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor4{} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    /// I.i.d. `N(0, stddev^2)` samples drawn in row-major order.
    pub fn randn(shape: Shape, rng: &mut Prng, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(invalid!("randn stddev must be positive and finite, got {stddev}"));
        }
        let data = (0..shape.len()).map(|_| T::from_f64(rng.normal() * stddev)).collect();
        Ok(Tensor4 { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: Shape, rng: &mut Prng, lo: f64, hi: f64) -> Self {
        let data = (0..shape.len()).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.shape.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// The `h * w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn elementwise(a: &Self, b: &Self, op: BinaryOp) -> Result<Self> {
        if a.shape != b.shape {
            return Err(shape_err!("elementwise {op:?} on {} and {}", a.shape, b.shape));
        }
        let f = match op {
            BinaryOp::Add => |x: T, y: T| x + y,
            BinaryOp::Sub => |x: T, y: T| x - y,
            BinaryOp::Mul => |x: T, y: T| x * y,
        };
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor4 { shape: a.shape, data };
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::elementwise(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(self, other, BinaryOp::Mul)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("add_assign on {} and {}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Reduces over `axes`; reduced dimensions collapse to 1. Accumulation
    /// visits input elements in row-major order, so results are bitwise
    /// reproducible. An empty axis set returns a copy.
    pub fn reduce(&self, axes: &[Axis], op: ReduceOp) -> Self {
        let s = self.shape;
        let keep = |axis: Axis, dim: usize| if axes.contains(&axis) { 1 } else { dim };
        let out_shape = Shape {
            n: keep(Axis::N, s.n),
            c: keep(Axis::C, s.c),
            h: keep(Axis::H, s.h),
            w: keep(Axis::W, s.w),
        };
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_shape.len()];
        let mut i = 0;
        for n in 0..s.n {
            let on = n.min(out_shape.n - 1);
            for c in 0..s.c {
                let oc = c.min(out_shape.c - 1);
                for h in 0..s.h {
                    let oh = h.min(out_shape.h - 1);
                    for w in 0..s.w {
                        let o = out_shape.offset(on, oc, oh, w.min(out_shape.w - 1));
                        let v = self.data[i];
                        out[o] = match op {
                            ReduceOp::Max => out[o].max(v),
                            _ => out[o] + v,
                        };
                        i += 1;
                    }
                }
            }
        }
        if op == ReduceOp::Mean {
            let count = T::from_f64((s.len() / out_shape.len()) as f64);
            out.iter_mut().for_each(|v| *v = *v / count);
        }
        Tensor4 {
            shape: out_shape,
            data: out,
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Multiplies each `(n, c)` plane by `gate[n, c]`; `gate` is `(n, c, 1, 1)`.
    pub fn mul_channel_gate(&self, gate: &Self) -> Result<Self> {
        let s = self.shape;
        if gate.shape != s.with_hw(1, 1) {
            return Err(shape_err!("channel gate {} for input {s}", gate.shape));
        }
        let p = s.plane();
        let data = self
            .data
            .chunks_exact(p)
            .zip(&gate.data)
            .flat_map(|(plane, &g)| plane.iter().map(move |&v| v * g))
            .collect();
        Ok(Tensor4 { shape: s, data })
    }

    /// Multiplies every channel of sample `n` by `gate[n, 0]`; `gate` is
    /// `(n, 1, h, w)`.
    pub fn mul_spatial_gate(&self, gate: &Self) -> Result<Self> {
        let s = self.shape;
        if gate.shape != s.with_c(1) {
            return Err(shape_err!("spatial gate {} for input {s}", gate.shape));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.len());
        for n in 0..s.n {
            let g = &gate.data[n * p..(n + 1) * p];
            for c in 0..s.c {
                data.extend(self.plane(n, c).iter().zip(g).map(|(&v, &gv)| v * gv));
            }
        }
        Ok(Tensor4 { shape: s, data })
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(1) != first.shape.with_n(1) {
                return Err(shape_err!("concat_batch of {} and {}", first.shape, p.shape));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(first.shape.with_n(n), data)
    }

    /// Samples `start..start + count` along the batch axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.n {
            return Err(shape_err!("batch slice {start}..{} of {}", start + count, self.shape));
        }
        let s = self.shape.c * self.shape.plane();
        Self::from_vec(
            self.shape.with_n(count),
            self.data[start * s..(start + count) * s].to_vec(),
        )
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {} with {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

pub fn zeros<T: Scalar>(shape: Shape) -> Tensor4<T> {
    Tensor4::zeros(shape)
}

pub fn randn<T: Scalar>(shape: Shape, rng: &mut Prng, stddev: f64) -> Result<Tensor4<T>> {
    Tensor4::randn(shape, rng, stddev)
}

/// Builds a [`Shape`], panicking on zero dimensions. Handy in tests.
pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("valid shape")
}
