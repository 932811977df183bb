//! Four-stage decoder assembly.
//!
//! The deepest feature `x4` is refined and emits `p1`. Each shallower stage
//! upsamples the previous refined map, gates the skip feature with it, adds
//! the two and refines the sum before its head emits the next prediction;
//! the stride-4 stage emits `p4`.

use crate::blocks::{DecoderConfig, Eucb, Lgag, Mscam, SegHead, SegOutputs, StageFeatures};
use crate::error::{shape_err, Error, Result};
use crate::metrics::cost::{CostEntry, Costed};
use crate::nn::module::join;
use crate::nn::{Layer, Module, Visitor};
use crate::rng::Prng;
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Debug)]
pub struct DecoderStage<T> {
    /// Pyramid level consumed through the skip connection (1-based).
    pub level: usize,
    pub eucb: Eucb<T>,
    pub lgag: Lgag<T>,
    pub mscam: Mscam<T>,
    pub head: SegHead<T>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub cfg: DecoderConfig,
    pub deep: Mscam<T>,
    pub deep_head: SegHead<T>,
    /// Levels 3, 2, 1 in execution order.
    pub stages: Vec<DecoderStage<T>>,
}

fn ctx<V>(r: Result<V>, stage: &str) -> Result<V> {
    r.map_err(|e| e.in_stage(stage))
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &DecoderConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let deep = Mscam::new(c[3], cfg, rng)?;
        let deep_head = SegHead::new(c[3], cfg.num_classes, rng)?;
        let mut stages = Vec::with_capacity(3);
        for level in [3usize, 2, 1] {
            let (c_prev, c_skip) = (c[level], c[level - 1]);
            stages.push(DecoderStage {
                level,
                eucb: Eucb::new(c_prev, c_skip, rng)?,
                lgag: Lgag::new(c_skip, c_skip, cfg, rng)?,
                mscam: Mscam::new(c_skip, cfg, rng)?,
                head: SegHead::new(c_skip, cfg.num_classes, rng)?,
            });
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            deep,
            deep_head,
            stages,
        })
    }

    pub fn forward(&mut self, f: &StageFeatures<T>) -> Result<SegOutputs<T>> {
        ctx(f.validate(&self.cfg), "decoder input")?;
        let mut d = ctx(self.deep.forward(&f.x[3]), "decoder stage 4 (MSCAM)")?;
        let p1 = ctx(self.deep_head.forward(&d), "decoder stage 4 (head)")?;
        let mut preds = vec![p1];
        for st in &mut self.stages {
            let name = format!("decoder stage {}", st.level);
            let u = ctx(st.eucb.forward(&d), &format!("{name} (EUCB)"))?;
            let skip = &f.x[st.level - 1];
            let a = ctx(st.lgag.forward(&u, skip), &format!("{name} (LGAG)"))?;
            let s = ctx(u.add(&a), &format!("{name} (fusion)"))?;
            d = ctx(st.mscam.forward(&s), &format!("{name} (MSCAM)"))?;
            preds.push(ctx(st.head.forward(&d), &format!("{name} (head)"))?);
        }
        let p: [Tensor4<T>; 4] = preds
            .try_into()
            .map_err(|_| Error::Shape("decoder must emit four heads".into()))?;
        Ok(SegOutputs { p })
    }

    /// Back-propagates head adjoints `[g_p1, .., g_p4]`; returns the
    /// adjoints of `x1..x4`.
    pub fn backward(&mut self, grads: &[Tensor4<T>; 4]) -> Result<[Tensor4<T>; 4]> {
        let mut from_above: Option<Tensor4<T>> = None;
        let mut gx: [Option<Tensor4<T>>; 4] = Default::default();
        for (i, st) in self.stages.iter_mut().enumerate().rev() {
            let name = format!("decoder stage {} backward", st.level);
            let mut g = ctx(st.head.backward(&grads[i + 1]), &name)?;
            if let Some(up) = from_above.take() {
                ctx(g.add_assign(&up), &name)?;
            }
            let g_s = ctx(st.mscam.backward(&g), &name)?;
            let (g_gate, g_skip) = ctx(st.lgag.backward(&g_s), &name)?;
            let g_u = ctx(g_s.add(&g_gate), &name)?;
            gx[st.level - 1] = Some(g_skip);
            from_above = Some(ctx(st.eucb.backward(&g_u), &name)?);
        }
        let mut g = ctx(self.deep_head.backward(&grads[0]), "decoder stage 4 backward")?;
        if let Some(up) = from_above {
            ctx(g.add_assign(&up), "decoder stage 4 backward")?;
        }
        gx[3] = Some(ctx(self.deep.backward(&g), "decoder stage 4 backward")?);
        let [a, b, c, d] = gx;
        match (a, b, c, d) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok([a, b, c, d]),
            _ => Err(shape_err!("decoder backward did not reach every stage")),
        }
    }

    /// Operation counts for pyramid features of the given shapes.
    pub fn cost(&self, prefix: &str, features: [Shape; 4], out: &mut Vec<CostEntry>) -> Result<()> {
        let d = self.deep.cost(&join(prefix, "mscam4"), features[3], out)?;
        self.deep_head.cost(&join(prefix, "head1"), d, out)?;
        let mut d = d;
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", st.level));
            let u = st.eucb.cost(&join(&p, "eucb"), d, out)?;
            let s = st.lgag.cost(&join(&p, "lgag"), u, features[st.level - 1], out)?;
            out.push(CostEntry {
                name: join(&p, "fusion"),
                flops: s.len() as u64,
                ..Default::default()
            });
            d = st.mscam.cost(&join(&p, "mscam"), s, out)?;
            st.head.cost(&join(&p, &format!("head{}", i + 2)), d, out)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.deep.visit(&join(prefix, "mscam4"), v);
        self.deep_head.visit(&join(prefix, "head1"), v);
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", st.level));
            st.eucb.visit(&join(&p, "eucb"), v);
            st.lgag.visit(&join(&p, "lgag"), v);
            st.mscam.visit(&join(&p, "mscam"), v);
            st.head.visit(&join(&p, &format!("head{}", i + 2)), v);
        }
    }
}

/// Feature shapes an image of `h x w` produces at strides 4..32.
pub fn pyramid_shapes(n: usize, channels: [usize; 4], h: usize, w: usize) -> Result<[Shape; 4]> {
    if !h.is_multiple_of(32) || !w.is_multiple_of(32) || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "input size {h}x{w} must be a positive multiple of 32"
        )));
    }
    let mut out = [Shape::new(1, 1, 1, 1)?; 4];
    for (i, o) in out.iter_mut().enumerate() {
        let stride = 4 << i;
        *o = Shape::new(n, channels[i], h / stride, w / stride)?;
    }
    Ok(out)
}
