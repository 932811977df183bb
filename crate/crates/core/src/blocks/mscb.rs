//! Multi-scale convolution block.
//!
//! Inverted-residual layout: 1x1 expansion, batch norm, relu6; one depthwise
//! convolution per configured kernel size applied in parallel and summed;
//! batch norm, relu6; channel shuffle across the branch count; 1x1
//! projection and a final batch norm.

use crate::blocks::config::DecoderConfig;
use crate::error::Result;
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::module::join;
use crate::nn::{Activation, ActivationLayer, BatchNorm2d, Conv2d, ConvSpec, Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Permutes channels as `(groups, c / groups) -> (c / groups, groups)`.
/// Identity when `groups` does not divide the channel count.
pub fn channel_shuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Tensor4<T> {
    let s = x.shape();
    if groups <= 1 || !s.c.is_multiple_of(groups) {
        return x.clone();
    }
    let per = s.c / groups;
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for g in 0..groups {
            for k in 0..per {
                y.plane_mut(n, k * groups + g).copy_from_slice(x.plane(n, g * per + k));
            }
        }
    }
    y
}

/// Inverse permutation of [`channel_shuffle`].
pub fn channel_unshuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Tensor4<T> {
    let s = x.shape();
    if groups <= 1 || !s.c.is_multiple_of(groups) {
        return x.clone();
    }
    let per = s.c / groups;
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for g in 0..groups {
            for k in 0..per {
                y.plane_mut(n, g * per + k).copy_from_slice(x.plane(n, k * groups + g));
            }
        }
    }
    y
}

#[derive(Clone, Debug)]
pub struct Mscb<T> {
    expand: Conv2d<T>,
    expand_bn: BatchNorm2d<T>,
    expand_act: ActivationLayer<T>,
    branches: Vec<Conv2d<T>>,
    mix_bn: BatchNorm2d<T>,
    mix_act: ActivationLayer<T>,
    shuffle_groups: usize,
    project: Conv2d<T>,
    project_bn: BatchNorm2d<T>,
}

impl<T: Scalar> Mscb<T> {
    pub fn new(c_in: usize, c_out: usize, cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        let hidden = cfg.expanded(c_in);
        let branches = cfg
            .kernel_scales
            .iter()
            .map(|&k| Conv2d::new(ConvSpec::depthwise(hidden, k), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mscb {
            expand: Conv2d::new(ConvSpec::pointwise(c_in, hidden), rng)?,
            expand_bn: BatchNorm2d::new(hidden)?,
            expand_act: ActivationLayer::new(Activation::Relu6),
            branches,
            mix_bn: BatchNorm2d::new(hidden)?,
            mix_act: ActivationLayer::new(Activation::Relu6),
            shuffle_groups: cfg.kernel_scales.len(),
            project: Conv2d::new(ConvSpec::pointwise(hidden, c_out), rng)?,
            project_bn: BatchNorm2d::new(c_out)?,
        })
    }
}

impl<T: Scalar> Module<T> for Mscb<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.expand.visit(&join(prefix, "expand"), v);
        self.expand_bn.visit(&join(prefix, "expand_bn"), v);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("dw{i}")), v);
        }
        self.mix_bn.visit(&join(prefix, "mix_bn"), v);
        self.project.visit(&join(prefix, "project"), v);
        self.project_bn.visit(&join(prefix, "project_bn"), v);
    }
}

impl<T: Scalar> Layer<T> for Mscb<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let e = self.expand.forward(x)?;
        let e = self.expand_bn.forward(&e)?;
        let e = self.expand_act.forward(&e)?;
        let mut sum = self.branches[0].forward(&e)?;
        for b in &mut self.branches[1..] {
            sum.add_assign(&b.forward(&e)?)?;
        }
        let h = self.mix_bn.forward(&sum)?;
        let h = self.mix_act.forward(&h)?;
        let h = channel_shuffle(&h, self.shuffle_groups);
        let y = self.project.forward(&h)?;
        self.project_bn.forward(&y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.project_bn.backward(grad_out)?;
        let g = self.project.backward(&g)?;
        let g = channel_unshuffle(&g, self.shuffle_groups);
        let g = self.mix_act.backward(&g)?;
        let g_sum = self.mix_bn.backward(&g)?;
        let mut g_e = self.branches[0].backward(&g_sum)?;
        for b in &mut self.branches[1..] {
            g_e.add_assign(&b.backward(&g_sum)?)?;
        }
        let g = self.expand_act.backward(&g_e)?;
        let g = self.expand_bn.backward(&g)?;
        self.expand.backward(&g)
    }
}

impl<T: Scalar> Costed for Mscb<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        let e = k.conv(&self.expand.params, input)?;
        k.batchnorm(e);
        k.pointwise(e);
        for b in &self.branches {
            k.conv(&b.params, e)?;
        }
        // branch sums
        for _ in 1..self.branches.len() {
            k.pointwise(e);
        }
        k.batchnorm(e);
        k.pointwise(e);
        let y = k.conv(&self.project.params, e)?;
        k.batchnorm(y);
        out.push(CostEntry {
            name: prefix.to_string(),
            params: 0,
            macs: k.macs,
            flops: k.flops,
        });
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    #[test]
    fn shuffle_round_trip_and_layout() {
        let x = Tensor4::<f64>::randn(shape(2, 6, 2, 2), &mut Prng::new(1), 1.0).unwrap();
        let y = channel_shuffle(&x, 3);
        // channel k*3+g of y is channel g*2+k of x
        assert_eq!(y.plane(1, 1), x.plane(1, 2));
        assert_eq!(y.plane(1, 3), x.plane(1, 1));
        assert_eq!(channel_unshuffle(&y, 3), x);
        assert_eq!(channel_shuffle(&x, 4), x);
    }

    #[test]
    fn preserves_shape() {
        let mut rng = Prng::new(3);
        for scales in [vec![1], vec![3, 5], vec![1, 3, 5]] {
            let cfg = DecoderConfig {
                kernel_scales: scales,
                ..DecoderConfig::tiny([4, 8, 12, 16])
            };
            let mut m = Mscb::<f32>::new(8, 8, &cfg, &mut rng).unwrap();
            let x = Tensor4::randn(shape(2, 8, 5, 7), &mut rng, 1.0).unwrap();
            assert_eq!(m.forward(&x).unwrap().shape(), x.shape());
        }
    }
}
