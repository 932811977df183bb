//! Large-kernel grouped attention gate.
//!
//! `q = relu(bn(conv_g(g)) + bn(conv_x(x)))`, `alpha = sigmoid(bn(conv_1x1(q)))`,
//! output `x * alpha`. Both grouped convolutions map to `x.c` channels with
//! `groups = gcd(c_in, x.c)`.

use crate::blocks::config::DecoderConfig;
use crate::error::{invalid, shape_err, Result};
use crate::metrics::cost::{CostEntry, OpCounter};
use crate::nn::module::join;
use crate::nn::{
    activation_backward, activation_forward, sigmoid, Activation, BatchNorm2d, Conv2d, ConvSpec, Layer, Module, Visitor,
};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x: Tensor4<T>,
    q_pre: Tensor4<T>,
    q: Tensor4<T>,
    alpha: Tensor4<T>,
}

#[derive(Clone, Debug)]
pub struct Lgag<T> {
    pub gate_conv: Conv2d<T>,
    pub gate_bn: BatchNorm2d<T>,
    pub skip_conv: Conv2d<T>,
    pub skip_bn: BatchNorm2d<T>,
    pub psi_conv: Conv2d<T>,
    pub psi_bn: BatchNorm2d<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Lgag<T> {
    /// `c_gate` channels for the gating signal, `c_skip` for the skip feature.
    pub fn new(c_gate: usize, c_skip: usize, cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        let c_int = c_skip;
        let k = cfg.lgag_kernel;
        Ok(Lgag {
            gate_conv: Conv2d::new(ConvSpec::new(c_gate, c_int, k).groups(gcd(c_gate, c_int)), rng)?,
            gate_bn: BatchNorm2d::new(c_int)?,
            skip_conv: Conv2d::new(ConvSpec::new(c_skip, c_int, k).groups(gcd(c_skip, c_int)), rng)?,
            skip_bn: BatchNorm2d::new(c_int)?,
            psi_conv: Conv2d::new(ConvSpec::pointwise(c_int, 1), rng)?,
            psi_bn: BatchNorm2d::new(1)?,
            cache: None,
        })
    }

    pub fn attention(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.alpha)
    }

    pub fn forward(&mut self, g: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (gs, xs) = (g.shape(), x.shape());
        if gs.n != xs.n || gs.h != xs.h || gs.w != xs.w {
            return Err(shape_err!("LGAG gating signal {gs} does not match skip feature {xs}"));
        }
        let a = self.gate_conv.forward(g)?;
        let a = self.gate_bn.forward(&a)?;
        let b = self.skip_conv.forward(x)?;
        let b = self.skip_bn.forward(&b)?;
        let q_pre = a.add(&b)?;
        let q = activation_forward(&q_pre, Activation::Relu);
        let psi = self.psi_conv.forward(&q)?;
        let alpha = self.psi_bn.forward(&psi)?.map(sigmoid);
        let y = x.mul_spatial_gate(&alpha)?;
        self.cache = Some(Cache {
            x: x.clone(),
            q_pre,
            q,
            alpha,
        });
        Ok(y)
    }

    /// Returns `(grad_g, grad_x)`.
    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| invalid!("LGAG backward called before forward"))?;
        let s = c.x.shape();
        let mut grad_x = grad_out.mul_spatial_gate(&c.alpha)?;
        let mut g_alpha = Tensor4::zeros(s.with_c(1));
        for n in 0..s.n {
            let ga = g_alpha.plane_mut(n, 0);
            for ch in 0..s.c {
                for ((acc, &g), &v) in ga.iter_mut().zip(grad_out.plane(n, ch)).zip(c.x.plane(n, ch)) {
                    *acc = *acc + g * v;
                }
            }
            for (acc, &a) in ga.iter_mut().zip(c.alpha.plane(n, 0)) {
                *acc = *acc * a * (T::one() - a);
            }
        }
        let g = self.psi_bn.backward(&g_alpha)?;
        let g = self.psi_conv.backward(&g)?;
        let g_q = activation_backward(&c.q_pre, &c.q, &g, Activation::Relu)?;
        let ga = self.gate_bn.backward(&g_q)?;
        let grad_g = self.gate_conv.backward(&ga)?;
        let gb = self.skip_bn.backward(&g_q)?;
        grad_x.add_assign(&self.skip_conv.backward(&gb)?)?;
        Ok((grad_g, grad_x))
    }

    pub fn cost(&self, prefix: &str, gate: Shape, skip: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        let a = k.conv(&self.gate_conv.params, gate)?;
        k.batchnorm(a);
        let b = k.conv(&self.skip_conv.params, skip)?;
        k.batchnorm(b);
        k.pointwise(b); // add
        k.pointwise(b); // relu
        let p = k.conv(&self.psi_conv.params, b)?;
        k.batchnorm(p);
        k.pointwise(p); // sigmoid
        k.pointwise(skip); // gating
        out.push(CostEntry {
            name: prefix.to_string(),
            macs: k.macs,
            flops: k.flops,
            ..Default::default()
        });
        Ok(skip)
    }
}

impl<T: Scalar> Module<T> for Lgag<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.gate_conv.visit(&join(prefix, "gate_conv"), v);
        self.gate_bn.visit(&join(prefix, "gate_bn"), v);
        self.skip_conv.visit(&join(prefix, "skip_conv"), v);
        self.skip_bn.visit(&join(prefix, "skip_bn"), v);
        self.psi_conv.visit(&join(prefix, "psi_conv"), v);
        self.psi_bn.visit(&join(prefix, "psi_bn"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    #[test]
    fn gcd_values() {
        assert_eq!(gcd(160, 160), 160);
        assert_eq!(gcd(12, 8), 4);
        assert_eq!(gcd(7, 3), 1);
    }

    #[test]
    fn zero_psi_halves_skip() {
        let mut rng = Prng::new(5);
        let mut l = Lgag::<f64>::new(8, 8, &DecoderConfig::default(), &mut rng).unwrap();
        l.psi_conv.params.weight.value.fill(0.0);
        let g = Tensor4::randn(shape(1, 8, 6, 6), &mut rng, 1.0).unwrap();
        let x = Tensor4::randn(shape(1, 8, 6, 6), &mut rng, 1.0).unwrap();
        let y = l.forward(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_spatial_dims_error() {
        let mut rng = Prng::new(5);
        let mut l = Lgag::<f64>::new(4, 8, &DecoderConfig::default(), &mut rng).unwrap();
        let g = Tensor4::zeros(shape(1, 4, 6, 6));
        let x = Tensor4::zeros(shape(1, 8, 5, 6));
        assert!(l.forward(&g, &x).is_err());
    }

    #[test]
    fn gating_bound_with_different_widths() {
        let mut rng = Prng::new(6);
        let mut l = Lgag::<f64>::new(12, 8, &DecoderConfig::default(), &mut rng).unwrap();
        assert_eq!(l.gate_conv.params.groups, 4);
        let g = Tensor4::randn(shape(2, 12, 5, 5), &mut rng, 1.0).unwrap();
        let x = Tensor4::randn(shape(2, 8, 5, 5), &mut rng, 1.0).unwrap();
        let y = l.forward(&g, &x).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| b.abs() <= a.abs()));
    }
}
