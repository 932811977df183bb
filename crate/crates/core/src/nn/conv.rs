//! Direct grouped 2-D cross-correlation with zero padding.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::nn::module::{join, Layer, Module, Param, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Weights of shape `(c_out, c_in / groups, k, k)` plus an optional bias.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Static description used to build a [`ConvParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self::new(c_in, c_out, 1)
    }

    pub fn depthwise(c: usize, kernel: usize) -> Self {
        Self::new(c, c, kernel).groups(c)
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(invalid!(
                "conv groups {} must divide c_in {} and c_out {}",
                self.groups,
                self.c_in,
                self.c_out
            ));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(invalid!("conv kernel and stride must be >= 1"));
        }
        Ok(())
    }
}

impl<T: Scalar> ConvParams<T> {
    /// He-normal weights, `N(0, 2 / fan_in)`, and zero bias.
    pub fn init(spec: ConvSpec, rng: &mut Prng) -> Result<Self> {
        spec.validate()?;
        let wshape = Shape::new(spec.c_out, spec.c_in / spec.groups, spec.kernel, spec.kernel)?;
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let weight = Param::new(Tensor4::randn(wshape, rng, std)?);
        Ok(Self::with_weight(spec, weight))
    }

    pub fn zeroed(spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let wshape = Shape::new(spec.c_out, spec.c_in / spec.groups, spec.kernel, spec.kernel)?;
        Ok(Self::with_weight(spec, Param::zeros(wshape)))
    }

    fn with_weight(spec: ConvSpec, weight: Param<T>) -> Self {
        let bias = spec
            .bias
            .then(|| Param::zeros(Shape::new(1, spec.c_out, 1, 1).unwrap()));
        ConvParams {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape().c * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape().h
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let k = self.kernel();
        if input.c != self.c_in() {
            return Err(shape_err!(
                "conv expects {} input channels (groups {}), got input {input}",
                self.c_in(),
                self.groups
            ));
        }
        let out_dim = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if padded < k {
                return Err(shape_err!(
                    "conv k={k} pad={} is larger than input {input}",
                    self.padding
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Shape::new(input.n, self.c_out(), out_dim(input.h)?, out_dim(input.w)?)
    }

    /// Multiply-accumulates for one forward pass over `input`.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let k = self.kernel() as u64;
        Ok(out.len() as u64 * (self.c_in() / self.groups) as u64 * k * k)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `kk`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + kk - pad in [0, in_len)
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if in_len + pad <= kk {
        0
    } else {
        ((in_len + pad - kk - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let os = p.output_shape(xs)?;
    let k = p.kernel();
    let cin_g = p.c_in() / p.groups;
    let cout_g = p.c_out() / p.groups;
    let (stride, pad) = (p.stride, p.padding);
    let w = p.weight.value.data();
    let bias = p.bias.as_ref().map(|b| b.value.data());

    let mut out = Tensor4::zeros(os);
    let per_sample = os.c * os.plane();
    out.data_mut()
        .par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(n, out_n)| {
            for oc in 0..os.c {
                let g = oc / cout_g;
                let plane = &mut out_n[oc * os.plane()..(oc + 1) * os.plane()];
                if let Some(b) = bias {
                    plane.iter_mut().for_each(|v| *v = b[oc]);
                }
                for icg in 0..cin_g {
                    let input = x.plane(n, g * cin_g + icg);
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(os.h, xs.h, ky, stride, pad);
                        for kx in 0..k {
                            let wv = w[((oc * cin_g + icg) * k + ky) * k + kx];
                            let (ox0, ox1) = valid_range(os.w, xs.w, kx, stride, pad);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let in_row = &input[iy * xs.w..(iy + 1) * xs.w];
                                let out_row = &mut plane[oy * os.w..(oy + 1) * os.w];
                                for ox in ox0..ox1 {
                                    out_row[ox] = out_row[ox] + wv * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Returns the input adjoint and accumulates into the weight and bias
/// gradient slots. Per-sample parameter partials are summed in batch order,
/// so the result does not depend on the thread count.
pub fn conv2d_backward<T: Scalar>(x: &Tensor4<T>, p: &mut ConvParams<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let os = p.output_shape(xs)?;
    if grad_out.shape() != os {
        return Err(shape_err!(
            "conv backward got grad {} for output {os}",
            grad_out.shape()
        ));
    }
    let k = p.kernel();
    let cin_g = p.c_in() / p.groups;
    let cout_g = p.c_out() / p.groups;
    let (stride, pad) = (p.stride, p.padding);
    let w = p.weight.value.data();
    let wlen = w.len();
    let has_bias = p.bias.is_some();

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let mut gx = vec![T::zero(); xs.c * xs.plane()];
            let mut gw = vec![T::zero(); wlen];
            let mut gb = vec![T::zero(); if has_bias { os.c } else { 0 }];
            for oc in 0..os.c {
                let g = oc / cout_g;
                let go = grad_out.plane(n, oc);
                if has_bias {
                    gb[oc] = go.iter().fold(T::zero(), |a, &v| a + v);
                }
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let input = x.plane(n, ic);
                    let gx_plane = &mut gx[ic * xs.plane()..(ic + 1) * xs.plane()];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(os.h, xs.h, ky, stride, pad);
                        for kx in 0..k {
                            let widx = ((oc * cin_g + icg) * k + ky) * k + kx;
                            let wv = w[widx];
                            let (ox0, ox1) = valid_range(os.w, xs.w, kx, stride, pad);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let go_row = &go[oy * os.w..(oy + 1) * os.w];
                                let in_row = &input[iy * xs.w..(iy + 1) * xs.w];
                                let gx_row = &mut gx_plane[iy * xs.w..(iy + 1) * xs.w];
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - pad;
                                    acc = acc + go_row[ox] * in_row[ix];
                                    gx_row[ix] = gx_row[ix] + wv * go_row[ox];
                                }
                            }
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
            (gx, gw, gb)
        })
        .collect();

    let mut grad_x = Vec::with_capacity(xs.len());
    let wg = p.weight.grad.data_mut();
    for (gx, gw, gb) in &partials {
        grad_x.extend_from_slice(gx);
        for (a, &b) in wg.iter_mut().zip(gw) {
            *a = *a + b;
        }
        if let Some(bias) = &mut p.bias {
            for (a, &b) in bias.grad.data_mut().iter_mut().zip(gb) {
                *a = *a + b;
            }
        }
    }
    Tensor4::from_vec(xs, grad_x)
}

/// Convolution layer caching its input for the backward pass.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub params: ConvParams<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, rng: &mut Prng) -> Result<Self> {
        Ok(Self::from_params(ConvParams::init(spec, rng)?))
    }

    pub fn from_params(params: ConvParams<T>) -> Self {
        Conv2d { params, input: None }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.params.visit(prefix, v);
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = conv2d_forward(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| invalid!("conv backward called before forward"))?;
        conv2d_backward(x, &mut self.params, grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    /// Textbook six-loop correlation used as the oracle.
    fn brute_force(x: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
        let os = p.output_shape(x.shape()).unwrap();
        let xs = x.shape();
        let k = p.kernel();
        let cin_g = p.c_in() / p.groups;
        let cout_g = p.c_out() / p.groups;
        let mut out = Tensor4::zeros(os);
        for n in 0..os.n {
            for oc in 0..os.c {
                let g = oc / cout_g;
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b.value.data()[oc]);
                        for icg in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += p.weight.value.get(oc, icg, ky, kx)
                                        * x.get(n, g * cin_g + icg, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise() {
        let mut p = ConvParams::<f64>::zeroed(ConvSpec::pointwise(1, 1).bias(true)).unwrap();
        p.weight.value.data_mut()[0] = 1.0;
        let x = Tensor4::randn(shape(2, 1, 4, 5), &mut Prng::new(1), 1.0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn depthwise_ones_center_is_45() {
        let mut p = ConvParams::<f64>::zeroed(ConvSpec::depthwise(1, 3).bias(true)).unwrap();
        p.weight.value.fill(1.0);
        let x = Tensor4::from_vec(shape(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 45.0);
        assert_eq!(y, brute_force(&x, &p));
        // corner sees 1+2+4+5
        assert_eq!(y.get(0, 0, 0, 0), 12.0);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = ConvParams::<f32>::zeroed(ConvSpec::new(2, 3, 3).bias(true)).unwrap();
        p.bias
            .as_mut()
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5]);
        let x = Tensor4::randn(shape(1, 2, 5, 5), &mut Prng::new(3), 1.0).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        for (c, b) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            assert!(y.plane(0, c).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn matches_brute_force_strided_grouped() {
        let mut rng = Prng::new(17);
        for (cin, cout, k, stride, pad, groups, h) in [
            (4, 6, 3, 2, 1, 2, 8),
            (3, 3, 5, 1, 2, 3, 7),
            (2, 4, 1, 1, 0, 1, 5),
            (6, 6, 3, 2, 1, 6, 9),
        ] {
            let spec = ConvSpec::new(cin, cout, k)
                .stride(stride)
                .padding(pad)
                .groups(groups)
                .bias(true);
            let mut p = ConvParams::<f64>::init(spec, &mut rng).unwrap();
            p.bias.as_mut().unwrap().value = Tensor4::randn(shape(1, cout, 1, 1), &mut rng, 1.0).unwrap();
            let x = Tensor4::randn(shape(2, cin, h, h), &mut rng, 1.0).unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            assert!(y.max_abs_diff(&brute_force(&x, &p)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn pointwise_is_matrix_multiply() {
        let mut rng = Prng::new(23);
        let p = ConvParams::<f64>::init(ConvSpec::pointwise(3, 5), &mut rng).unwrap();
        let x = Tensor4::randn(shape(2, 3, 4, 4), &mut rng, 1.0).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        for n in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    for o in 0..5 {
                        let expect: f64 = (0..3)
                            .map(|i| p.weight.value.get(o, i, 0, 0) * x.get(n, i, oy, ox))
                            .sum();
                        assert!((y.get(n, o, oy, ox) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Prng::new(4);
        let mut p = ConvParams::<f64>::init(ConvSpec::new(2, 2, 3).bias(true), &mut rng).unwrap();
        let x = Tensor4::randn(shape(1, 2, 4, 4), &mut rng, 1.0).unwrap();
        let gx = conv2d_backward(&x, &mut p, &Tensor4::zeros(shape(1, 2, 4, 4))).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(p.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(p.bias.unwrap().grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = ConvParams::<f32>::zeroed(ConvSpec::new(4, 4, 3).groups(2)).unwrap();
        assert!(p.output_shape(shape(1, 3, 5, 5)).is_err());
        let p = ConvParams::<f32>::zeroed(ConvSpec::new(2, 2, 3).stride(2).padding(0)).unwrap();
        assert!(p.output_shape(shape(1, 2, 2, 2)).is_err());
        assert_eq!(p.output_shape(shape(1, 2, 6, 6)).unwrap(), shape(1, 2, 2, 2));
        assert!(ConvParams::<f32>::zeroed(ConvSpec::new(3, 4, 3).groups(2)).is_err());
    }

    #[test]
    fn macs_formula() {
        let p = ConvParams::<f32>::zeroed(ConvSpec::pointwise(2, 3)).unwrap();
        assert_eq!(p.macs(shape(1, 2, 1, 1)).unwrap(), 6);
        let p = ConvParams::<f32>::zeroed(ConvSpec::depthwise(4, 3)).unwrap();
        assert_eq!(p.macs(shape(1, 4, 5, 5)).unwrap(), 4 * 25 * 9);
    }
}
