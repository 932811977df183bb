//! Spatial attention: `x * sigmoid(conv_kxk([mean_c x, max_c x]))`.

use crate::blocks::config::DecoderConfig;
use crate::error::{invalid, Result};
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::module::join;
use crate::nn::{sigmoid, Conv2d, ConvSpec, Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Debug)]
struct Cache<T> {
    x: Tensor4<T>,
    argmax: Vec<usize>,
    attention: Tensor4<T>,
}

#[derive(Clone, Debug)]
pub struct Sab<T> {
    pub conv: Conv2d<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Sab<T> {
    pub fn new(cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        Ok(Sab {
            conv: Conv2d::new(ConvSpec::new(2, 1, cfg.sab_kernel).bias(true), rng)?,
            cache: None,
        })
    }

    pub fn attention(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.attention)
    }
}

/// `(n, 2, h, w)` channel-mean / channel-max descriptor and the argmax
/// channel per pixel (first maximum wins).
fn describe<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let s = x.shape();
    let p = s.plane();
    let count = T::from_f64(s.c as f64);
    let mut d = Tensor4::zeros(s.with_c(2));
    let mut argmax = vec![0usize; s.n * p];
    for n in 0..s.n {
        for i in 0..p {
            let mut sum = T::zero();
            let mut best = 0;
            let mut best_v = T::neg_infinity();
            for c in 0..s.c {
                let v = x.plane(n, c)[i];
                sum = sum + v;
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            d.plane_mut(n, 0)[i] = sum / count;
            d.plane_mut(n, 1)[i] = best_v;
            argmax[n * p + i] = best;
        }
    }
    (d, argmax)
}

impl<T: Scalar> Module<T> for Sab<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&join(prefix, "conv"), v);
    }
}

impl<T: Scalar> Layer<T> for Sab<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (d, argmax) = describe(x);
        let attention = self.conv.forward(&d)?.map(sigmoid);
        let y = x.mul_spatial_gate(&attention)?;
        self.cache = Some(Cache {
            x: x.clone(),
            argmax,
            attention,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| invalid!("SAB backward called before forward"))?;
        let s = c.x.shape();
        let p = s.plane();
        let mut grad_x = grad_out.mul_spatial_gate(&c.attention)?;

        let mut g_logit = Tensor4::zeros(s.with_c(1));
        for n in 0..s.n {
            let gl = g_logit.plane_mut(n, 0);
            for ch in 0..s.c {
                for ((acc, &g), &v) in gl.iter_mut().zip(grad_out.plane(n, ch)).zip(c.x.plane(n, ch)) {
                    *acc = *acc + g * v;
                }
            }
            for (acc, &a) in gl.iter_mut().zip(c.attention.plane(n, 0)) {
                *acc = *acc * a * (T::one() - a);
            }
        }
        let g_desc = self.conv.backward(&g_logit)?;
        let count = T::from_f64(s.c as f64);
        for n in 0..s.n {
            for ch in 0..s.c {
                let mean_g = g_desc.plane(n, 0);
                let gx = grad_x.plane_mut(n, ch);
                for i in 0..p {
                    gx[i] = gx[i] + mean_g[i] / count;
                }
            }
            for i in 0..p {
                let ch = c.argmax[n * p + i];
                let v = grad_x.plane(n, ch)[i] + g_desc.plane(n, 1)[i];
                grad_x.plane_mut(n, ch)[i] = v;
            }
        }
        Ok(grad_x)
    }
}

impl<T: Scalar> Costed for Sab<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        k.pointwise(input); // channel mean
        k.pointwise(input); // channel max
        let a = k.conv(&self.conv.params, input.with_c(2))?;
        k.pointwise(a);
        k.pointwise(input);
        out.push(CostEntry {
            name: prefix.to_string(),
            macs: k.macs,
            flops: k.flops,
            ..Default::default()
        });
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    #[test]
    fn zero_conv_halves_input() {
        let mut rng = Prng::new(1);
        let mut sab = Sab::<f64>::new(&DecoderConfig::default(), &mut rng).unwrap();
        sab.conv.params.weight.value.fill(0.0);
        let x = Tensor4::randn(shape(1, 4, 6, 6), &mut rng, 1.0).unwrap();
        let y = sab.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn gating_bound() {
        let mut rng = Prng::new(4);
        let mut sab = Sab::<f64>::new(&DecoderConfig::default(), &mut rng).unwrap();
        let x = Tensor4::randn(shape(2, 3, 6, 6), &mut rng, 2.0).unwrap();
        let y = sab.forward(&x).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| b.abs() <= a.abs()));
    }
}
