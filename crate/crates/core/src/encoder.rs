//! Plain convolutional pyramid producing features at strides 4, 8, 16, 32.

use serde::{Deserialize, Serialize};

use crate::blocks::StageFeatures;
use crate::error::{Error, Result};
use crate::metrics::cost::{CostEntry, Costed, OpCounter};
use crate::nn::module::join;
use crate::nn::{Activation, ActivationLayer, BatchNorm2d, Conv2d, ConvSpec, Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub stem_kernel: usize,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [32, 64, 160, 256],
            stem_kernel: 3,
            blocks_per_stage: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive, got {:?}",
                self.channels
            )));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "stem_kernel must be odd, got {}",
                self.stem_kernel
            )));
        }
        Ok(())
    }
}

/// Convolution (no bias), batch norm, relu.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    act: ActivationLayer<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut Prng) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(ConvSpec::new(c_in, c_out, k).stride(stride), rng)?,
            bn: BatchNorm2d::new(c_out)?,
            act: ActivationLayer::new(Activation::Relu),
        })
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}

impl<T: Scalar> Layer<T> for ConvBnRelu<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let h = self.conv.forward(x)?;
        let h = self.bn.forward(&h)?;
        self.act.forward(&h)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl<T: Scalar> Costed for ConvBnRelu<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let mut k = OpCounter::default();
        let y = k.conv(&self.conv.params, input)?;
        k.batchnorm(y);
        k.pointwise(y);
        out.push(CostEntry {
            name: prefix.to_string(),
            macs: k.macs,
            flops: k.flops,
            ..Default::default()
        });
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    /// Units of each stage in execution order; the first stage starts with
    /// two stride-2 units, the others with one.
    pub stages: [Vec<ConvBnRelu<T>>; 4],
}

fn unit_name(stage: usize, i: usize) -> String {
    format!("stage{}.unit{}", stage + 1, i)
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let k = cfg.stem_kernel;
        let mut stages: [Vec<ConvBnRelu<T>>; 4] = Default::default();
        for (s, units) in stages.iter_mut().enumerate() {
            if s == 0 {
                units.push(ConvBnRelu::new(INPUT_CHANNELS, c[0], k, 2, rng)?);
                units.push(ConvBnRelu::new(c[0], c[0], 3, 2, rng)?);
            } else {
                units.push(ConvBnRelu::new(c[s - 1], c[s], 3, 2, rng)?);
            }
            for _ in 0..cfg.blocks_per_stage {
                units.push(ConvBnRelu::new(c[s], c[s], 3, 1, rng)?);
            }
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn check_input(s: Shape) -> Result<()> {
        if s.c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "encoder expects {INPUT_CHANNELS} input channels, got {s}"
            )));
        }
        if !s.h.is_multiple_of(32) || !s.w.is_multiple_of(32) {
            return Err(Error::InvalidArgument(format!(
                "input size {}x{} must be divisible by 32",
                s.h, s.w
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, image: &Tensor4<T>) -> Result<StageFeatures<T>> {
        Self::check_input(image.shape())?;
        let mut h = image.clone();
        let mut feats = Vec::with_capacity(4);
        for (s, units) in self.stages.iter_mut().enumerate() {
            for (i, u) in units.iter_mut().enumerate() {
                h = u
                    .forward(&h)
                    .map_err(|e| e.in_stage(format!("encoder {}", unit_name(s, i))))?;
            }
            feats.push(h.clone());
        }
        let x: [Tensor4<T>; 4] = feats.try_into().map_err(|_| Error::Shape("encoder stages".into()))?;
        Ok(StageFeatures { x })
    }

    /// Takes the adjoints of the four stage outputs and returns the image adjoint.
    pub fn backward(&mut self, grads: [Tensor4<T>; 4]) -> Result<Tensor4<T>> {
        let mut carry: Option<Tensor4<T>> = None;
        for (s, g_stage) in grads.into_iter().enumerate().rev() {
            let mut g = g_stage;
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            for (i, u) in self.stages[s].iter_mut().enumerate().rev() {
                g = u
                    .backward(&g)
                    .map_err(|e| e.in_stage(format!("encoder {} backward", unit_name(s, i))))?;
            }
            carry = Some(g);
        }
        carry.ok_or_else(|| Error::Shape("encoder has no stages".into()))
    }

    pub fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<[Shape; 4]> {
        Self::check_input(input)?;
        let mut s = input;
        let mut shapes = [input; 4];
        for (st, units) in self.stages.iter().enumerate() {
            for (i, u) in units.iter().enumerate() {
                s = u.cost(&join(prefix, &unit_name(st, i)), s, out)?;
            }
            shapes[st] = s;
        }
        Ok(shapes)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (s, units) in self.stages.iter_mut().enumerate() {
            for (i, u) in units.iter_mut().enumerate() {
                u.visit(&join(prefix, &unit_name(s, i)), v);
            }
        }
    }
}
