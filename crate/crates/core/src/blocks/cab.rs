//! Channel attention: `x * sigmoid(mlp(avgpool x) + mlp(maxpool x))` with a
//! shared two-layer 1x1 MLP.

use crate::blocks::config::DecoderConfig;
use crate::error::{invalid, Result};
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::module::join;
use crate::nn::{
    activation_backward, activation_forward, pool_global, pool_global_backward, sigmoid, Activation, Conv2d, ConvSpec,
    Layer, Module, PoolKind, Visitor,
};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Debug)]
struct Cache<T> {
    x: Tensor4<T>,
    hidden_pre: Tensor4<T>,
    hidden: Tensor4<T>,
    attention: Tensor4<T>,
}

#[derive(Clone, Debug)]
pub struct Cab<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Cab<T> {
    pub fn new(c: usize, cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        let hidden = cfg.cab_hidden(c);
        Ok(Cab {
            fc1: Conv2d::new(ConvSpec::pointwise(c, hidden), rng)?,
            fc2: Conv2d::new(ConvSpec::pointwise(hidden, c), rng)?,
            cache: None,
        })
    }

    /// Attention weights `(n, c, 1, 1)` from the last forward pass.
    pub fn attention(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.attention)
    }
}

impl<T: Scalar> Module<T> for Cab<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
    }
}

impl<T: Scalar> Layer<T> for Cab<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = x.shape().n;
        // Both pooled descriptors go through the shared MLP in one batch.
        let pooled = Tensor4::concat_batch(&[&pool_global(x, PoolKind::Avg), &pool_global(x, PoolKind::Max)])?;
        let hidden_pre = self.fc1.forward(&pooled)?;
        let hidden = activation_forward(&hidden_pre, Activation::Relu);
        let logits2 = self.fc2.forward(&hidden)?;
        let logits = logits2.slice_batch(0, n)?.add(&logits2.slice_batch(n, n)?)?;
        let attention = logits.map(sigmoid);
        let y = x.mul_channel_gate(&attention)?;
        self.cache = Some(Cache {
            x: x.clone(),
            hidden_pre,
            hidden,
            attention,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| invalid!("CAB backward called before forward"))?;
        let s = c.x.shape();
        let mut grad_x = grad_out.mul_channel_gate(&c.attention)?;

        let mut grad_logits = Tensor4::zeros(s.with_hw(1, 1));
        for n in 0..s.n {
            for ch in 0..s.c {
                let dot = grad_out
                    .plane(n, ch)
                    .iter()
                    .zip(c.x.plane(n, ch))
                    .fold(T::zero(), |a, (&g, &v)| a + g * v);
                let a = c.attention.get(n, ch, 0, 0);
                grad_logits.set(n, ch, 0, 0, dot * a * (T::one() - a));
            }
        }
        let grad_logits2 = Tensor4::concat_batch(&[&grad_logits, &grad_logits])?;
        let g_hidden = self.fc2.backward(&grad_logits2)?;
        let g_hidden = activation_backward(&c.hidden_pre, &c.hidden, &g_hidden, Activation::Relu)?;
        let g_pooled = self.fc1.backward(&g_hidden)?;
        grad_x.add_assign(&pool_global_backward(
            &c.x,
            &g_pooled.slice_batch(0, s.n)?,
            PoolKind::Avg,
        )?)?;
        grad_x.add_assign(&pool_global_backward(
            &c.x,
            &g_pooled.slice_batch(s.n, s.n)?,
            PoolKind::Max,
        )?)?;
        Ok(grad_x)
    }
}

impl<T: Scalar> Costed for Cab<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        k.pointwise(input); // avg pool
        k.pointwise(input); // max pool
        let pooled = input.with_hw(1, 1).with_n(2 * input.n);
        let h = k.conv(&self.fc1.params, pooled)?;
        k.pointwise(h);
        let l = k.conv(&self.fc2.params, h)?;
        k.pointwise(l.with_n(input.n)); // branch sum
        k.pointwise(l.with_n(input.n)); // sigmoid
        k.pointwise(input); // gating
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
    fn zero_mlp_halves_input() {
        let mut rng = Prng::new(1);
        let mut cab = Cab::<f64>::new(8, &DecoderConfig::default(), &mut rng).unwrap();
        cab.fc1.params.weight.value.fill(0.0);
        cab.fc2.params.weight.value.fill(0.0);
        let x = Tensor4::randn(shape(2, 8, 4, 4), &mut rng, 1.0).unwrap();
        let y = cab.forward(&x).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
        assert!(cab.attention().unwrap().data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn gating_bound() {
        let mut rng = Prng::new(2);
        let mut cab = Cab::<f64>::new(8, &DecoderConfig::default(), &mut rng).unwrap();
        let x = Tensor4::randn(shape(1, 8, 5, 5), &mut rng, 3.0).unwrap();
        let y = cab.forward(&x).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| b.abs() <= a.abs()));
    }
}
