use crate::blocks::{Cab, DecoderConfig, Mscb, Sab};
use crate::error::Result;
use crate::metrics::cost::{CostEntry, Costed};
use crate::nn::module::join;
use crate::nn::{Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Multi-scale convolutional attention module: channel attention, then
/// spatial attention, then the multi-scale convolution block. Channel count
/// is preserved.
#[derive(Clone, Debug)]
pub struct Mscam<T> {
    pub cab: Cab<T>,
    pub sab: Sab<T>,
    pub mscb: Mscb<T>,
}

impl<T: Scalar> Mscam<T> {
    pub fn new(c: usize, cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        Ok(Mscam {
            cab: Cab::new(c, cfg, rng)?,
            sab: Sab::new(cfg, rng)?,
            mscb: Mscb::new(c, c, cfg, rng)?,
        })
    }
}

impl<T: Scalar> Module<T> for Mscam<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.cab.visit(&join(prefix, "cab"), v);
        self.sab.visit(&join(prefix, "sab"), v);
        self.mscb.visit(&join(prefix, "mscb"), v);
    }
}

impl<T: Scalar> Layer<T> for Mscam<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let a = self.cab.forward(x)?;
        let b = self.sab.forward(&a)?;
        self.mscb.forward(&b)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.mscb.backward(grad_out)?;
        let g = self.sab.backward(&g)?;
        self.cab.backward(&g)
    }
}

impl<T: Scalar> Costed for Mscam<T> {
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape> {
        let s = self.cab.cost(&join(prefix, "cab"), input, out)?;
        let s = self.sab.cost(&join(prefix, "sab"), s, out)?;
        self.mscb.cost(&join(prefix, "mscb"), s, out)
    }
}
