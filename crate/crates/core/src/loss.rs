//! Segmentation losses and the combinatorial multi-head loss.
//!
//! Scalar values are accumulated in `f64` in row-major order; gradients are
//! returned in the tensor's precision.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{sigmoid, upsample_bilinear, upsample_bilinear_backward};
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_ce: f64,
    pub w_dice: f64,
    /// Dice smoothing constant.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_ce: 1.0,
            w_dice: 1.0,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_ce) || !ok(self.w_dice) || self.w_ce + self.w_dice == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 and not both zero, got w_ce={} w_dice={}",
                self.w_ce, self.w_dice
            )));
        }
        if !ok(self.smooth) {
            return Err(Error::Config(format!("smooth must be >= 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetLoss {
    /// Bit `i` set means head `p_{i+1}` participates.
    pub mask: u32,
    pub ce: f64,
    pub dice: f64,
    pub loss: f64,
}

impl SubsetLoss {
    /// 1-based head numbers in the subset.
    pub fn heads(&self) -> Vec<usize> {
        (0..32).filter(|i| self.mask >> i & 1 == 1).map(|i| i + 1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_subset: Vec<SubsetLoss>,
    pub total: f64,
}

fn check_target<T: Scalar>(logits: Shape, target: &Tensor4<T>, num_classes: usize) -> Result<()> {
    let t = target.shape();
    if t.n != logits.n || t.c != 1 {
        return Err(shape_err!("target {t} does not fit logits {logits}"));
    }
    for &v in target.data() {
        let ok = if num_classes == 1 {
            v == T::zero() || v == T::one()
        } else {
            v >= T::zero() && v.fract() == T::zero() && v.as_f64() < num_classes as f64
        };
        if !ok {
            return Err(if num_classes == 1 {
                invalid!("binary target values must be 0 or 1, found {v}")
            } else {
                invalid!("class index {v} outside 0..{num_classes}")
            });
        }
    }
    Ok(())
}

fn softmax_pixel(logits: &Tensor4<f64>, n: usize, idx: usize, out: &mut [f64]) {
    let c = logits.shape().c;
    let plane = logits.shape().plane();
    let base = n * c * plane + idx;
    let max = (0..c)
        .map(|k| logits.data()[base + k * plane])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (k, o) in out.iter_mut().enumerate() {
        *o = (logits.data()[base + k * plane] - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean pixel cross-entropy for logits already at target resolution.
fn ce_at_target<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>) -> (f64, Tensor4<T>) {
    let s = logits.shape();
    let count = (s.n * s.plane()) as f64;
    let mut grad = Tensor4::zeros(s);
    let mut total = 0.0;
    if s.c == 1 {
        for ((g, &z), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
            let (z, t) = (z.as_f64(), t.as_f64());
            total += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
            *g = T::from_f64((sigmoid(z) - t) / count);
        }
        return (total / count, grad);
    }
    let z = logits.cast::<f64>();
    let mut p = vec![0.0; s.c];
    for n in 0..s.n {
        for i in 0..s.plane() {
            softmax_pixel(&z, n, i, &mut p);
            let y = target.data()[n * s.plane() + i].as_f64() as usize;
            total -= p[y].max(f64::MIN_POSITIVE).ln();
            for (k, &pk) in p.iter().enumerate() {
                let onehot = if k == y { 1.0 } else { 0.0 };
                grad.data_mut()[s.offset(n, k, i / s.w, i % s.w)] = T::from_f64((pk - onehot) / count);
            }
        }
    }
    (total / count, grad)
}

/// Smoothed soft Dice loss at target resolution (mean over classes when
/// multi-class).
fn dice_at_target<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>, smooth: f64) -> (f64, Tensor4<T>) {
    let s = logits.shape();
    let mut grad = Tensor4::zeros(s);
    if s.c == 1 {
        let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z.as_f64())).collect();
        let (mut inter, mut sum) = (0.0, 0.0);
        for (&pi, &t) in p.iter().zip(target.data()) {
            let t = t.as_f64();
            inter += pi * t;
            sum += pi + t;
        }
        let num = 2.0 * inter + smooth;
        let den = sum + smooth;
        for ((g, &pi), &t) in grad.data_mut().iter_mut().zip(&p).zip(target.data()) {
            let dp = -(2.0 * t.as_f64() * den - num) / (den * den);
            *g = T::from_f64(dp * pi * (1.0 - pi));
        }
        return (1.0 - num / den, grad);
    }
    let z = logits.cast::<f64>();
    let classes = s.c;
    let mut probs = vec![0.0; s.len()];
    let mut px = vec![0.0; classes];
    for n in 0..s.n {
        for i in 0..s.plane() {
            softmax_pixel(&z, n, i, &mut px);
            for (k, &v) in px.iter().enumerate() {
                probs[s.offset(n, k, i / s.w, i % s.w)] = v;
            }
        }
    }
    let label = |n: usize, i: usize| target.data()[n * s.plane() + i].as_f64() as usize;
    let mut inter = vec![0.0; classes];
    let mut sum = vec![0.0; classes];
    for n in 0..s.n {
        for i in 0..s.plane() {
            let y = label(n, i);
            for k in 0..classes {
                let p = probs[s.offset(n, k, i / s.w, i % s.w)];
                let t = if k == y { 1.0 } else { 0.0 };
                inter[k] += p * t;
                sum[k] += p + t;
            }
        }
    }
    let mut loss = 0.0;
    for k in 0..classes {
        loss += 1.0 - (2.0 * inter[k] + smooth) / (sum[k] + smooth);
    }
    loss /= classes as f64;
    let mut dp = vec![0.0; classes];
    for n in 0..s.n {
        for i in 0..s.plane() {
            let y = label(n, i);
            let mut dot = 0.0;
            for k in 0..classes {
                let den = sum[k] + smooth;
                let t = if k == y { 1.0 } else { 0.0 };
                dp[k] = -(2.0 * t * den - (2.0 * inter[k] + smooth)) / (den * den) / classes as f64;
                dot += dp[k] * probs[s.offset(n, k, i / s.w, i % s.w)];
            }
            for k in 0..classes {
                let o = s.offset(n, k, i / s.w, i % s.w);
                grad.data_mut()[o] = T::from_f64(probs[o] * (dp[k] - dot));
            }
        }
    }
    (loss, grad)
}

fn to_target_res<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    let t = target.shape();
    check_target(logits.shape(), target, logits.shape().c)?;
    upsample_bilinear(logits, t.h, t.w)
}

/// Cross-entropy (sigmoid BCE when `c == 1`, softmax otherwise). Logits are
/// bilinearly upsampled to the target resolution first; the returned
/// gradient has the logits' shape.
pub fn ce_loss<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    let up = to_target_res(logits, target)?;
    let (v, g) = ce_at_target(&up, target);
    Ok((v, upsample_bilinear_backward(&g, logits.shape().h, logits.shape().w)?))
}

pub fn dice_loss<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>, smooth: f64) -> Result<(f64, Tensor4<T>)> {
    let up = to_target_res(logits, target)?;
    let (v, g) = dice_at_target(&up, target, smooth);
    Ok((v, upsample_bilinear_backward(&g, logits.shape().h, logits.shape().w)?))
}

pub const MAX_HEADS: usize = 8;

/// Sums `w_ce * ce + w_dice * dice` over every non-empty subset of heads,
/// each subset scored on the mean of its upsampled logits. Subsets are
/// visited in binary counting order. Returns the report and one gradient
/// per head.
pub fn mutation_loss<T: Scalar>(
    heads: &[Tensor4<T>],
    target: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<Tensor4<T>>)> {
    cfg.validate()?;
    if heads.is_empty() || heads.len() > MAX_HEADS {
        return Err(invalid!("need 1..={MAX_HEADS} heads, got {}", heads.len()));
    }
    let c = heads[0].shape().c;
    if let Some(h) = heads
        .iter()
        .find(|h| h.shape().c != c || h.shape().n != heads[0].shape().n)
    {
        return Err(shape_err!("heads disagree: {} vs {}", heads[0].shape(), h.shape()));
    }
    let up = heads
        .iter()
        .map(|h| to_target_res(h, target))
        .collect::<Result<Vec<_>>>()?;
    let shape = up[0].shape();
    let mut up_grads: Vec<Tensor4<T>> = vec![Tensor4::zeros(shape); heads.len()];
    let mut per_subset = Vec::with_capacity((1 << heads.len()) - 1);
    let mut total = 0.0;
    for mask in 1u32..(1 << heads.len()) {
        let members: Vec<usize> = (0..heads.len()).filter(|i| mask >> i & 1 == 1).collect();
        let inv = T::from_f64(1.0 / members.len() as f64);
        let mut combined = up[members[0]].clone();
        for &i in &members[1..] {
            combined.add_assign(&up[i])?;
        }
        let combined = combined.scale(inv);
        let (ce, g_ce) = ce_at_target(&combined, target);
        let (dice, g_dice) = dice_at_target(&combined, target, cfg.smooth);
        let loss = cfg.w_ce * ce + cfg.w_dice * dice;
        total += loss;
        per_subset.push(SubsetLoss { mask, ce, dice, loss });
        let (wc, wd) = (T::from_f64(cfg.w_ce), T::from_f64(cfg.w_dice));
        for &i in &members {
            for ((acc, &a), &b) in up_grads[i].data_mut().iter_mut().zip(g_ce.data()).zip(g_dice.data()) {
                *acc = *acc + (wc * a + wd * b) * inv;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {total}")));
    }
    let grads = up_grads
        .iter()
        .zip(heads)
        .map(|(g, h)| upsample_bilinear_backward(g, h.shape().h, h.shape().w))
        .collect::<Result<Vec<_>>>()?;
    Ok((LossReport { per_subset, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::relative_error;
    use crate::rng::Prng;
    use crate::tensor::shape;
    use proptest::prelude::*;

    fn mask(rng: &mut Prng, s: Shape, p: f64) -> Tensor4<f64> {
        let d = (0..s.len())
            .map(|_| if rng.next_f64() < p { 1.0 } else { 0.0 })
            .collect();
        Tensor4::from_vec(s, d).unwrap()
    }

    fn saturated(t: &Tensor4<f64>, correct: bool) -> Tensor4<f64> {
        t.map(|v| if (v == 1.0) == correct { 20.0 } else { -20.0 })
    }

    /// Central differences of a scalar loss w.r.t. every logit.
    fn numeric_grad(z: &Tensor4<f64>, f: impl Fn(&Tensor4<f64>) -> f64) -> Vec<f64> {
        (0..z.data().len())
            .map(|i| {
                let h = 1e-4 * z.data()[i].abs().max(1.0);
                let mut a = z.clone();
                a.data_mut()[i] += h;
                let mut b = z.clone();
                b.data_mut()[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut rng = Prng::new(1);
        let t = mask(&mut rng, shape(2, 1, 4, 4), 0.3);
        let (v, _) = ce_loss(&Tensor4::zeros(t.shape()), &t).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits() {
        let mut rng = Prng::new(2);
        let t = mask(&mut rng, shape(2, 1, 8, 8), 0.4);
        let z = saturated(&t, true);
        assert!(ce_loss(&z, &t).unwrap().0 < 1e-6);
        assert!(dice_loss(&z, &t, 1.0).unwrap().0 < 1e-3);
    }

    #[test]
    fn saturated_wrong_logits_dice_closed_form() {
        let s = shape(1, 1, 4, 4);
        let t = Tensor4::from_vec(s, (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        let z = saturated(&t, false);
        let (v, _) = dice_loss(&z, &t, 1.0).unwrap();
        // p is 1 exactly where t is 0 (up to e^-20): sum p = 8, sum t = 8.
        let expected = 1.0 - 1.0 / (8.0 + 8.0 + 1.0);
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let mut rng = Prng::new(3);
        let t = mask(&mut rng, shape(2, 1, 6, 6), 0.4);
        let z = Tensor4::randn(shape(2, 1, 3, 3), &mut rng, 1.5).unwrap();
        let (_, g) = ce_loss(&z, &t).unwrap();
        assert!(max_rel(g.data(), &numeric_grad(&z, |z| ce_loss(z, &t).unwrap().0)) < 1e-4);
        let (_, g) = dice_loss(&z, &t, 1.0).unwrap();
        assert!(max_rel(g.data(), &numeric_grad(&z, |z| dice_loss(z, &t, 1.0).unwrap().0)) < 1e-4);
    }

    #[test]
    fn multiclass_gradients_match_finite_differences() {
        let mut rng = Prng::new(4);
        let s = shape(2, 1, 4, 4);
        let t = Tensor4::from_vec(s, (0..s.len()).map(|_| rng.below(3) as f64).collect()).unwrap();
        let z = Tensor4::randn(shape(2, 3, 4, 4), &mut rng, 1.0).unwrap();
        let (v, g) = ce_loss(&z, &t).unwrap();
        assert!(v > 0.0);
        assert!(max_rel(g.data(), &numeric_grad(&z, |z| ce_loss(z, &t).unwrap().0)) < 1e-4);
        let (_, g) = dice_loss(&z, &t, 1.0).unwrap();
        assert!(max_rel(g.data(), &numeric_grad(&z, |z| dice_loss(z, &t, 1.0).unwrap().0)) < 1e-4);
        let uniform = Tensor4::zeros(z.shape());
        assert!((ce_loss(&uniform, &t).unwrap().0 - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_targets_rejected() {
        let z = Tensor4::<f64>::zeros(shape(1, 1, 2, 2));
        let t = Tensor4::from_vec(shape(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(ce_loss(&z, &t).is_err());
        assert!(dice_loss(&z, &t, 1.0).is_err());
        let z3 = Tensor4::<f64>::zeros(shape(1, 2, 2, 2));
        assert!(ce_loss(&z3, &t).is_err());
    }

    #[test]
    fn subset_counts() {
        let mut rng = Prng::new(5);
        let t = mask(&mut rng, shape(1, 1, 16, 16), 0.3);
        let heads: Vec<_> = [2, 4, 8, 16]
            .iter()
            .map(|&r| Tensor4::randn(shape(1, 1, r, r), &mut rng, 1.0).unwrap())
            .collect();
        let (rep, grads) = mutation_loss(&heads, &t, &LossConfig::default()).unwrap();
        assert_eq!(rep.per_subset.len(), 15);
        assert_eq!(grads.len(), 4);
        assert_eq!(rep.per_subset[0].heads(), vec![1]);
        assert_eq!(rep.per_subset[14].heads(), vec![1, 2, 3, 4]);
        let (rep1, _) = mutation_loss(&heads[3..], &t, &LossConfig::default()).unwrap();
        assert_eq!(rep1.per_subset.len(), 1);
        let ce = ce_loss(&heads[3], &t).unwrap().0;
        let dice = dice_loss(&heads[3], &t, 1.0).unwrap().0;
        assert!((rep1.total - (ce + dice)).abs() < 1e-12);
    }

    #[test]
    fn identical_heads_give_fifteen_times() {
        let mut rng = Prng::new(6);
        let t = mask(&mut rng, shape(2, 1, 8, 8), 0.3);
        let h = Tensor4::randn(shape(2, 1, 8, 8), &mut rng, 1.0).unwrap();
        let heads = vec![h.clone(), h.clone(), h.clone(), h.clone()];
        let (rep, _) = mutation_loss(&heads, &t, &LossConfig::default()).unwrap();
        let (single, _) = mutation_loss(&heads[..1], &t, &LossConfig::default()).unwrap();
        assert!(relative_error(rep.total, 15.0 * single.total) < 1e-6);
    }

    #[test]
    fn gradient_is_sum_of_subset_gradients() {
        let mut rng = Prng::new(7);
        let t = mask(&mut rng, shape(1, 1, 8, 8), 0.3);
        let heads: Vec<_> = [2, 4, 8]
            .iter()
            .map(|&r| Tensor4::randn(shape(1, 1, r, r), &mut rng, 1.0).unwrap())
            .collect();
        let cfg = LossConfig::default();
        let (_, grads) = mutation_loss(&heads, &t, &cfg).unwrap();
        let mut manual: Vec<Tensor4<f64>> = heads.iter().map(|h| Tensor4::zeros(h.shape())).collect();
        for mask in 1u32..8 {
            let idx: Vec<usize> = (0..3).filter(|i| mask >> i & 1 == 1).collect();
            let k = idx.len() as f64;
            let mut combined = Tensor4::zeros(t.shape());
            for &i in &idx {
                combined
                    .add_assign(&upsample_bilinear(&heads[i], 8, 8).unwrap())
                    .unwrap();
            }
            let combined = combined.scale(1.0 / k);
            let (_, a) = ce_at_target(&combined, &t);
            let (_, b) = dice_at_target(&combined, &t, 1.0);
            let g = a.add(&b).unwrap().scale(1.0 / k);
            for &i in &idx {
                let s = heads[i].shape();
                manual[i]
                    .add_assign(&upsample_bilinear_backward(&g, s.h, s.w).unwrap())
                    .unwrap();
            }
        }
        for (a, b) in grads.iter().zip(&manual) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-14);
        }
        let total = |hs: &[Tensor4<f64>]| mutation_loss(hs, &t, &cfg).unwrap().0.total;
        for (i, g) in grads.iter().enumerate() {
            let numeric = numeric_grad(&heads[i], |z| {
                let mut hs = heads.clone();
                hs[i] = z.clone();
                total(&hs)
            });
            assert!(max_rel(g.data(), &numeric) < 1e-4);
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = LossConfig {
            w_ce: 0.0,
            w_dice: 0.0,
            ..Default::default()
        };
        let t = Tensor4::<f64>::zeros(shape(1, 1, 2, 2));
        assert!(mutation_loss(std::slice::from_ref(&t), &t, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn loss_ranges_and_monotone_saturation(seed in any::<u64>(), scale in 1.0f64..5.0) {
            let mut rng = Prng::new(seed);
            let t = mask(&mut rng, shape(1, 1, 6, 6), 0.4);
            let z = Tensor4::randn(t.shape(), &mut rng, 3.0).unwrap();
            let d = dice_loss(&z, &t, 1.0).unwrap().0;
            prop_assert!((0.0..1.0 + 1e-12).contains(&d));
            prop_assert!(ce_loss(&z, &t).unwrap().0 >= 0.0);
            let correct = t.map(|v| if v == 1.0 { 1.0 } else { -1.0 });
            let d1 = dice_loss(&correct, &t, 1.0).unwrap().0;
            let d2 = dice_loss(&correct.scale(scale), &t, 1.0).unwrap().0;
            prop_assert!(d2 <= d1 + 1e-15);
        }
    }
}
