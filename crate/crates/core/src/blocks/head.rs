use crate::error::Result;
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::{Conv2d, ConvSpec, Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Segmentation head: 1x1 conv with bias to `num_classes` raw logits.
#[derive(Clone, Debug)]
pub struct SegHead<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> SegHead<T> {
    pub fn new(c_in: usize, num_classes: usize, rng: &mut Prng) -> Result<Self> {
        Ok(SegHead {
            conv: Conv2d::new(ConvSpec::pointwise(c_in, num_classes).bias(true), rng)?,
        })
    }
}

impl<T: Scalar> Module<T> for SegHead<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(prefix, v);
    }
}

impl<T: Scalar> Layer<T> for SegHead<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.conv.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.conv.backward(grad_out)
    }
}

impl<T: Scalar> Costed for SegHead<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        let y = k.conv(&self.conv.params, input)?;
        out.push(CostEntry {
            name: prefix.to_string(),
            macs: k.macs,
            flops: k.flops,
            ..Default::default()
        });
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    #[test]
    fn binary_head_emits_one_channel() {
        let mut rng = Prng::new(1);
        let mut h = SegHead::<f32>::new(32, 1, &mut rng).unwrap();
        let x = Tensor4::randn(shape(2, 32, 4, 4), &mut rng, 1.0).unwrap();
        assert_eq!(h.forward(&x).unwrap().shape(), shape(2, 1, 4, 4));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut rng = Prng::new(1);
        let mut h = SegHead::<f64>::new(4, 2, &mut rng).unwrap();
        h.conv.params.weight.value.fill(0.0);
        h.conv
            .params
            .bias
            .as_mut()
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&[1.5, -0.5]);
        let x = Tensor4::randn(shape(1, 4, 3, 3), &mut rng, 1.0).unwrap();
        let y = h.forward(&x).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 1.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -0.5));
    }
}
