//! Encoder plus decoder.

use serde::{Deserialize, Serialize};

use crate::blocks::{Decoder, DecoderConfig, SegOutputs};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::cost::{attach_params, CostEntry, CostReport};
use crate::nn::module::join;
use crate::nn::{set_mode, Mode, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn tiny(channels: [usize; 4]) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                channels,
                ..Default::default()
            },
            decoder: DecoderConfig::tiny(channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.channels != self.decoder.channels {
            return Err(Error::Config(format!(
                "encoder channels {:?} differ from decoder channels {:?}",
                self.encoder.channels, self.decoder.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder: Encoder::new(&cfg.encoder, rng)?,
            decoder: Decoder::new(&cfg.decoder, rng)?,
        })
    }

    pub fn forward(&mut self, image: &Tensor4<T>) -> Result<SegOutputs<T>> {
        let f = self.encoder.forward(image)?;
        self.decoder.forward(&f)
    }

    /// Accumulates parameter gradients for head adjoints `[g_p1, .., g_p4]`
    /// and returns the image adjoint.
    pub fn backward(&mut self, grads: &[Tensor4<T>; 4]) -> Result<Tensor4<T>> {
        let gx = self.decoder.backward(grads)?;
        self.encoder.backward(gx)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        set_mode(self, mode);
    }

    /// Parameter table grouped by block plus operation counts for an
    /// `h x w` input.
    pub fn cost_report(&mut self, h: usize, w: usize) -> Result<CostReport> {
        let mut out: Vec<CostEntry> = Vec::new();
        let shapes = self.encoder.cost(
            "encoder",
            Shape::new(1, crate::encoder::INPUT_CHANNELS, h, w)?,
            &mut out,
        )?;
        self.decoder.cost("decoder", shapes, &mut out)?;
        let mut report = CostReport::from_entries(out, Some((h, w)));
        attach_params(&mut report, self);
        Ok(report)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.encoder.visit(&join(prefix, "encoder"), v);
        self.decoder.visit(&join(prefix, "decoder"), v);
    }
}

/// Decoder-only report for pyramid features of an `h x w` image.
pub fn decoder_cost_report<T: Scalar>(decoder: &mut Decoder<T>, h: usize, w: usize) -> Result<CostReport> {
    let shapes = crate::blocks::pyramid_shapes(1, decoder.cfg.channels, h, w)?;
    let mut out = Vec::new();
    decoder.cost("", shapes, &mut out)?;
    let mut report = CostReport::from_entries(out, Some((h, w)));
    attach_params(&mut report, decoder);
    Ok(report)
}

/// Anything that maps a normalized image batch to final-map logits.
pub trait Predictor {
    fn predict(&mut self, image: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Predictor for Model<f32> {
    fn predict(&mut self, image: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.set_mode(Mode::Eval);
        let out = self.forward(image);
        self.set_mode(Mode::Train);
        Ok(out?.p[3].clone())
    }
}
