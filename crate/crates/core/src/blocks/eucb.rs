use crate::error::{invalid, Result};
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::module::join;
use crate::nn::{
    upsample_nearest2x, upsample_nearest2x_backward, Activation, ActivationLayer, BatchNorm2d, Conv2d, ConvSpec, Layer,
    Module, Visitor,
};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Efficient up-convolution: nearest 2x upsample, 3x3 depthwise conv, batch
/// norm, relu, then a 1x1 conv to the next stage's width.
#[derive(Clone, Debug)]
pub struct Eucb<T> {
    pub dw: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    act: ActivationLayer<T>,
    pub project: Conv2d<T>,
    upsampled: bool,
}

impl<T: Scalar> Eucb<T> {
    pub fn new(c_in: usize, c_next: usize, rng: &mut Prng) -> Result<Self> {
        Ok(Eucb {
            dw: Conv2d::new(ConvSpec::depthwise(c_in, 3), rng)?,
            bn: BatchNorm2d::new(c_in)?,
            act: ActivationLayer::new(Activation::Relu),
            project: Conv2d::new(ConvSpec::pointwise(c_in, c_next).bias(true), rng)?,
            upsampled: false,
        })
    }
}

impl<T: Scalar> Module<T> for Eucb<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.dw.visit(&join(prefix, "dw"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        self.project.visit(&join(prefix, "project"), v);
    }
}

impl<T: Scalar> Layer<T> for Eucb<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let u = upsample_nearest2x(x);
        let h = self.dw.forward(&u)?;
        let h = self.bn.forward(&h)?;
        let h = self.act.forward(&h)?;
        self.upsampled = true;
        self.project.forward(&h)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if !self.upsampled {
            return Err(invalid!("EUCB backward called before forward"));
        }
        let g = self.project.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        let g = self.bn.backward(&g)?;
        let g = self.dw.backward(&g)?;
        upsample_nearest2x_backward(&g)
    }
}

impl<T: Scalar> Costed for Eucb<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        let u = input.with_hw(2 * input.h, 2 * input.w);
        let h = k.conv(&self.dw.params, u)?;
        k.batchnorm(h);
        k.pointwise(h);
        let y = k.conv(&self.project.params, h)?;
        out.push(CostEntry {
            name: prefix.to_string(),
            macs: k.macs,
            flops: k.flops,
            ..Default::default()
        });
        Ok(y)
    }
}
