//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{for_each_param, Module};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Optimizer state. Moment slots follow the model's parameter visiting
/// order and are created on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamWState {
            cfg,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update using the gradients currently stored in `model`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, model: &mut (impl Module<T> + ?Sized)) -> Result<()> {
        let mut bad: Option<String> = None;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        for_each_param(model, |name, p| {
            if bad.is_none() && !p.grad.all_finite() {
                bad = Some(name.to_string());
            }
            names.push(name.to_string());
            shapes.push(p.value.shape());
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{name}` is not finite"
            )));
        }
        if self.names.is_empty() {
            self.m = shapes.iter().map(|&s| Tensor4::zeros(s)).collect();
            self.v = self.m.clone();
            self.names = names;
        } else if self.names != names || self.m.iter().zip(&shapes).any(|(m, &s)| m.shape() != s) {
            return Err(Error::Shape("optimizer state does not match model parameters".into()));
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let lr = T::from_f64(c.lr);
        let keep = T::from_f64(1.0 - c.lr * c.weight_decay);
        let eps = T::from_f64(c.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        for_each_param(model, |_, p| {
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *w = *w * keep - lr * (m_hat / (v_hat.sqrt() + eps));
            }
            i += 1;
        });
        Ok(())
    }
}
