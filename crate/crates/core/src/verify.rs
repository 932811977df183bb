//! Finite-difference gradient suites over primitives, decoder blocks and a
//! full tiny model, all in double precision.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{Cab, Decoder, DecoderConfig, Eucb, Lgag, Mscam, Mscb, Sab, SegHead, StageFeatures};
use crate::error::{invalid, Result};
use crate::loss::{ce_loss, dice_loss, mutation_loss, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{project, FnLayer};
use crate::nn::{
    activation_backward, activation_forward, gradcheck, gradcheck_layer, pool_global, pool_global_backward,
    upsample_bilinear, upsample_bilinear_backward, upsample_nearest2x, upsample_nearest2x_backward, zero_grads,
    Activation, ActivationLayer, BatchNorm2d, BatchNormState, Conv2d, ConvSpec, Differentiable, GradCheckOptions,
    GradCheckReport, Module, Param, PoolKind, Visitor,
};
use crate::rng::Prng;
use crate::tensor::{shape, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Full,
}

impl FromStr for Scope {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "full" => Ok(Scope::Full),
            _ => Err(invalid!("unknown gradcheck scope {s:?} (expected ops, blocks or full)")),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Full => "full",
        })
    }
}

fn input(s: Shape, seed: u64) -> Result<Tensor4<f64>> {
    Tensor4::randn(s, &mut Prng::new(seed), 1.0)
}

/// Random `{0, 1}` mask.
fn binary_mask(s: Shape, seed: u64) -> Tensor4<f64> {
    let mut rng = Prng::new(seed);
    let mut t = Tensor4::zeros(s);
    for v in t.data_mut() {
        *v = if rng.next_f64() < 0.4 { 1.0 } else { 0.0 };
    }
    t
}

/// Scalar function of one tensor with a hand-written gradient.
struct ScalarFn<F>(F);

impl<F: FnMut(&Tensor4<f64>) -> Result<(f64, Tensor4<f64>)>> Differentiable for ScalarFn<F> {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        Ok((self.0)(&inputs[0])?.0)
    }
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        let (v, g) = (self.0)(&inputs[0])?;
        Ok((v, vec![g]))
    }
    fn visit_params(&mut self, _: &mut dyn Visitor<f64>) {}
}

fn conv(spec: ConvSpec, seed: u64) -> Result<Conv2d<f64>> {
    Conv2d::new(spec, &mut Prng::new(seed))
}

fn act_layer(kind: Activation) -> FnLayer {
    FnLayer::new(
        move |x| Ok(activation_forward(x, kind)),
        move |x, y, g| activation_backward(x, y, g, kind),
    )
}

/// Primitive layers and losses.
pub fn ops_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let x = input(shape(2, 4, 6, 6), 1)?;
    out.push(gradcheck_layer(
        "conv 3x3 dense + bias",
        conv(ConvSpec::new(4, 6, 3).bias(true), 2)?,
        x.clone(),
        opts,
    )?);
    out.push(gradcheck_layer(
        "conv 1x1 pointwise",
        conv(ConvSpec::pointwise(4, 3), 3)?,
        x.clone(),
        opts,
    )?);
    out.push(gradcheck_layer(
        "conv 5x5 depthwise",
        conv(ConvSpec::depthwise(4, 5), 4)?,
        x.clone(),
        opts,
    )?);
    out.push(gradcheck_layer(
        "conv 3x3 grouped stride 2",
        conv(ConvSpec::new(4, 6, 3).groups(2).stride(2).bias(true), 5)?,
        input(shape(2, 4, 7, 7), 6)?,
        opts,
    )?);
    out.push(gradcheck_layer(
        "batchnorm train",
        BatchNorm2d::<f64>::new(4)?,
        x.clone(),
        opts,
    )?);
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("softmax over channels", Activation::SoftmaxChannel),
    ] {
        out.push(gradcheck_layer(name, act_layer(kind), x.clone(), opts)?);
    }
    let r6 = x.map(|v| 4.0 * v);
    out.push(gradcheck_layer(
        "relu6",
        ActivationLayer::<f64>::new(Activation::Relu6),
        r6,
        opts,
    )?);
    for (name, kind) in [("global avg pool", PoolKind::Avg), ("global max pool", PoolKind::Max)] {
        let l = FnLayer::new(
            move |x| Ok(pool_global(x, kind)),
            move |x, _, g| pool_global_backward(x, g, kind),
        );
        out.push(gradcheck_layer(name, l, x.clone(), opts)?);
    }
    let near = FnLayer::new(|x| Ok(upsample_nearest2x(x)), |_, _, g| upsample_nearest2x_backward(g));
    out.push(gradcheck_layer("nearest upsample x2", near, x.clone(), opts)?);
    let bil = FnLayer::new(
        |x| upsample_bilinear(x, 16, 20),
        |x, _, g| upsample_bilinear_backward(g, x.shape().h, x.shape().w),
    );
    out.push(gradcheck_layer(
        "bilinear upsample",
        bil,
        input(shape(1, 2, 4, 5), 7)?,
        opts,
    )?);

    let z = input(shape(2, 1, 4, 4), 8)?;
    let t = binary_mask(shape(2, 1, 8, 8), 9);
    let (t1, t2) = (t.clone(), t.clone());
    out.push(gradcheck(
        "binary cross-entropy",
        &mut ScalarFn(move |z: &Tensor4<f64>| ce_loss(z, &t1)),
        std::slice::from_ref(&z),
        opts,
    )?);
    out.push(gradcheck(
        "soft dice",
        &mut ScalarFn(move |z: &Tensor4<f64>| dice_loss(z, &t2, 1.0)),
        &[z],
        opts,
    )?);
    let zm = input(shape(2, 3, 4, 4), 10)?;
    let mut rng = Prng::new(11);
    let mut tm = Tensor4::zeros(shape(2, 1, 4, 4));
    for v in tm.data_mut() {
        *v = rng.below(3) as f64;
    }
    let (tm1, tm2) = (tm.clone(), tm);
    out.push(gradcheck(
        "multi-class cross-entropy",
        &mut ScalarFn(move |z: &Tensor4<f64>| ce_loss(z, &tm1)),
        std::slice::from_ref(&zm),
        opts,
    )?);
    out.push(gradcheck(
        "multi-class soft dice",
        &mut ScalarFn(move |z: &Tensor4<f64>| dice_loss(z, &tm2, 1.0)),
        &[zm],
        opts,
    )?);
    out.push(gradcheck(
        "combination loss",
        &mut Combination::new(binary_mask(shape(2, 1, 16, 16), 12)),
        &heads(2, 13)?,
        opts,
    )?);
    Ok(out)
}

fn heads(n: usize, seed: u64) -> Result<Vec<Tensor4<f64>>> {
    [2usize, 4, 8, 16]
        .iter()
        .enumerate()
        .map(|(i, &s)| input(shape(n, 1, s, s), seed + i as u64))
        .collect()
}

/// The 15-subset loss as a function of the four head logits.
struct Combination {
    target: Tensor4<f64>,
    cfg: LossConfig,
}

impl Combination {
    fn new(target: Tensor4<f64>) -> Self {
        Combination {
            target,
            cfg: LossConfig::default(),
        }
    }
}

impl Differentiable for Combination {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        Ok(mutation_loss(inputs, &self.target, &self.cfg)?.0.total)
    }
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        let (r, g) = mutation_loss(inputs, &self.target, &self.cfg)?;
        Ok((r.total, g))
    }
    fn visit_params(&mut self, _: &mut dyn Visitor<f64>) {}
}

/// The gate takes two inputs, `[g, x]`.
struct GateCheck {
    gate: Lgag<f64>,
    projection: Option<Tensor4<f64>>,
}

impl Differentiable for GateCheck {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        let y = self.gate.forward(&inputs[0], &inputs[1])?;
        Ok(project(&mut self.projection, 41, &y)?.0)
    }
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        zero_grads(&mut self.gate);
        let y = self.gate.forward(&inputs[0], &inputs[1])?;
        let (v, r) = project(&mut self.projection, 41, &y)?;
        let (gg, gx) = self.gate.backward(&r)?;
        Ok((v, vec![gg, gx]))
    }
    fn visit_params(&mut self, v: &mut dyn Visitor<f64>) {
        self.gate.visit("", v);
    }
}

fn tiny_cfg() -> DecoderConfig {
    DecoderConfig::tiny([4, 8, 12, 16])
}

struct Scramble<'a>(&'a mut Prng);

impl Visitor<f64> for Scramble<'_> {
    fn param(&mut self, _: &str, _: &mut Param<f64>) {}
    fn batchnorm(&mut self, _: &str, bn: &mut BatchNormState<f64>) {
        for g in bn.gamma.value.data_mut() {
            *g = self.0.uniform(0.5, 1.5);
        }
        for b in bn.beta.value.data_mut() {
            *b = self.0.uniform(-0.5, 0.5);
        }
    }
}

/// Moves batch-norm scales and shifts off their initial values. At
/// `gamma = 1, beta = 0` a batch norm followed by relu and another batch
/// norm is scale invariant, so some derivatives vanish and their relative
/// error measures only round-off.
fn scrambled<M: Module<f64>>(mut m: M, seed: u64) -> M {
    m.visit("", &mut Scramble(&mut Prng::new(seed)));
    m
}

/// Each decoder block on its reference shape; the default-width multi-scale
/// block checks sampled coordinates.
pub fn blocks_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let cfg = tiny_cfg();
    let mut rng = Prng::new(21);
    let mut out = Vec::new();
    let x8 = input(shape(1, 8, 6, 6), 22)?;
    let mscb = Mscb::<f64>::new(8, 8, &cfg, &mut rng)?;
    out.push(gradcheck_layer("MSCB", scrambled(mscb, 1), x8.clone(), opts)?);
    let single = DecoderConfig {
        kernel_scales: vec![1],
        mscb_expansion: 1.0,
        ..cfg.clone()
    };
    let mscb = Mscb::<f64>::new(8, 8, &single, &mut rng)?;
    out.push(gradcheck_layer(
        "MSCB kernels {1}, expansion 1",
        scrambled(mscb, 2),
        x8.clone(),
        opts,
    )?);
    let capped = GradCheckOptions {
        max_coords_per_tensor: Some(opts.max_coords_per_tensor.unwrap_or(24).min(24)),
        ..opts.clone()
    };
    let mscb = Mscb::<f64>::new(256, 256, &DecoderConfig::default(), &mut rng)?;
    out.push(gradcheck_layer(
        "MSCB default, 1x256x7x7 (sampled)",
        scrambled(mscb, 3),
        input(shape(1, 256, 7, 7), 23)?,
        &capped,
    )?);
    out.push(gradcheck_layer(
        "CAB",
        Cab::<f64>::new(8, &cfg, &mut rng)?,
        input(shape(1, 8, 4, 4), 24)?,
        opts,
    )?);
    out.push(gradcheck_layer(
        "SAB",
        Sab::<f64>::new(&cfg, &mut rng)?,
        input(shape(1, 4, 6, 6), 25)?,
        opts,
    )?);
    let mscam = Mscam::<f64>::new(8, &cfg, &mut rng)?;
    out.push(gradcheck_layer(
        "MSCAM",
        scrambled(mscam, 4),
        input(shape(1, 8, 8, 8), 26)?,
        opts,
    )?);
    let mut gate = GateCheck {
        gate: scrambled(Lgag::new(8, 8, &cfg, &mut rng)?, 5),
        projection: None,
    };
    out.push(gradcheck(
        "LGAG",
        &mut gate,
        &[x8.clone(), input(shape(1, 8, 6, 6), 27)?],
        opts,
    )?);
    let eucb = Eucb::<f64>::new(4, 2, &mut rng)?;
    out.push(gradcheck_layer(
        "EUCB",
        scrambled(eucb, 6),
        input(shape(1, 4, 3, 3), 28)?,
        opts,
    )?);
    out.push(gradcheck_layer("SH", SegHead::<f64>::new(8, 1, &mut rng)?, x8, opts)?);
    Ok(out)
}

/// Decoder over all four pyramid inputs with every head projected.
struct DecoderCheck {
    decoder: Decoder<f64>,
    projections: [Option<Tensor4<f64>>; 4],
}

impl DecoderCheck {
    fn heads(&mut self, inputs: &[Tensor4<f64>]) -> Result<[Tensor4<f64>; 4]> {
        let f = StageFeatures::new(
            inputs[0].clone(),
            inputs[1].clone(),
            inputs[2].clone(),
            inputs[3].clone(),
        );
        Ok(self.decoder.forward(&f)?.p)
    }
}

impl Differentiable for DecoderCheck {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        let p = self.heads(inputs)?;
        let mut total = 0.0;
        for (i, y) in p.iter().enumerate() {
            total += project(&mut self.projections[i], 50 + i as u64, y)?.0;
        }
        Ok(total)
    }
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        zero_grads(&mut self.decoder);
        let p = self.heads(inputs)?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(4);
        for (i, y) in p.iter().enumerate() {
            let (v, r) = project(&mut self.projections[i], 50 + i as u64, y)?;
            total += v;
            grads.push(r);
        }
        let grads: [Tensor4<f64>; 4] = grads.try_into().expect("four heads");
        Ok((total, self.decoder.backward(&grads)?.to_vec()))
    }
    fn visit_params(&mut self, v: &mut dyn Visitor<f64>) {
        self.decoder.visit("", v);
    }
}

/// Encoder, decoder and the combination loss against a fixed mask.
struct ModelCheck {
    model: Model<f64>,
    target: Tensor4<f64>,
}

impl Differentiable for ModelCheck {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        let out = self.model.forward(&inputs[0])?;
        Ok(mutation_loss(&out.p, &self.target, &LossConfig::default())?.0.total)
    }
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        zero_grads(&mut self.model);
        let out = self.model.forward(&inputs[0])?;
        let (r, g) = mutation_loss(&out.p, &self.target, &LossConfig::default())?;
        let g: [Tensor4<f64>; 4] = g.try_into().expect("four heads");
        Ok((r.total, vec![self.model.backward(&g)?]))
    }
    fn visit_params(&mut self, v: &mut dyn Visitor<f64>) {
        self.model.visit("", v);
    }
}

pub const FULL_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
const RES: usize = 64;

/// Whole decoder on a batch of two pyramids, then a tiny encoder plus
/// decoder trained through the combination loss. Coordinates are sampled.
/// With dozens of stacked relu kinks a single step either straddles a kink
/// or drowns a tiny derivative in round-off, so each coordinate may fall
/// back along `FULL_STEPS`.
pub fn full_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let capped = GradCheckOptions {
        max_coords_per_tensor: Some(opts.max_coords_per_tensor.unwrap_or(8).min(8)),
        steps: FULL_STEPS.to_vec(),
        ..opts.clone()
    };
    let cfg = tiny_cfg();
    let mut rng = Prng::new(31);
    let mut dec = DecoderCheck {
        decoder: scrambled(Decoder::new(&cfg, &mut rng)?, 7),
        projections: Default::default(),
    };
    let pyramid: Vec<Tensor4<f64>> = crate::blocks::pyramid_shapes(2, cfg.channels, RES, RES)?
        .iter()
        .enumerate()
        .map(|(i, &s)| input(s, 32 + i as u64))
        .collect::<Result<_>>()?;
    let mut out = vec![gradcheck("decoder end to end", &mut dec, &pyramid, &capped)?];

    let mut m = ModelCheck {
        model: scrambled(Model::new(&ModelConfig::tiny(cfg.channels), &mut rng)?, 8),
        target: binary_mask(shape(2, 1, RES, RES), 36),
    };
    let image = input(shape(2, 3, RES, RES), 37)?;
    out.push(gradcheck(
        "tiny model with combination loss",
        &mut m,
        &[image],
        &capped,
    )?);
    Ok(out)
}

pub fn run_scope(scope: Scope, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    match scope {
        Scope::Ops => ops_suite(opts),
        Scope::Blocks => blocks_suite(opts),
        Scope::Full => full_suite(opts),
    }
}

/// Fixed-width pass/fail table.
pub fn format_table(reports: &[GradCheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>12}  {:>7}  result  worst coordinate\n",
        "case", "max rel err", "coords"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>7}  {:<6}  {}\n",
            r.name,
            r.max_rel_error,
            r.coords_checked,
            if r.passed { "pass" } else { "FAIL" },
            r.worst
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(reports: Vec<GradCheckReport>) {
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "\n{}", format_table(&reports));
    }

    #[test]
    fn ops_pass() {
        check(ops_suite(&GradCheckOptions::default()).unwrap());
    }

    #[test]
    fn blocks_pass() {
        check(blocks_suite(&GradCheckOptions::default()).unwrap());
    }

    #[test]
    fn full_passes() {
        check(full_suite(&GradCheckOptions::default()).unwrap());
    }

    #[test]
    fn scope_names() {
        assert_eq!("blocks".parse::<Scope>().unwrap(), Scope::Blocks);
        assert!("all".parse::<Scope>().is_err());
    }
}
