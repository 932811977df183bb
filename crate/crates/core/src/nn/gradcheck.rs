//! Central finite-difference verification of analytic adjoints.
//!
//! A target exposes a scalar objective of its inputs and parameters plus the
//! analytic gradient of that objective. Every input and parameter coordinate
//! (or a deterministic sample when a cap is set) is perturbed by
//! `h = 1e-4 * max(1, |theta|)` in both directions and the central quotient
//! is compared with the analytic value using
//! `|a - b| / max(|a|, |b|, 1e-8)`.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::nn::module::{Layer, Module, Param, Visitor};
use crate::rng::Prng;
use crate::tensor::Tensor4;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

/// Something with a differentiable scalar objective.
pub trait Differentiable {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64>;

    /// Objective and input adjoints. Parameter gradient slots must hold the
    /// parameter adjoints afterwards (implementations zero them first).
    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)>;

    fn visit_params(&mut self, v: &mut dyn Visitor<f64>);
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference steps relative to `max(1, |theta|)`, tried in
    /// order until one agrees with the analytic value. The reported error
    /// is the smallest seen.
    pub steps: Vec<f64>,
    /// Check at most this many coordinates per tensor (sampled
    /// deterministically). `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: DEFAULT_TOLERANCE,
            steps: vec![DEFAULT_STEP],
            max_coords_per_tensor: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn step_for(step: f64, theta: f64) -> f64 {
    step * theta.abs().max(1.0)
}

fn coords(len: usize, cap: Option<usize>, rng: &mut Prng) -> Vec<usize> {
    match cap {
        Some(cap) if cap < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            let mut picked = all[..cap].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

struct Collect<'a>(&'a mut Vec<(String, Tensor4<f64>, Tensor4<f64>)>);

impl Visitor<f64> for Collect<'_> {
    fn param(&mut self, name: &str, p: &mut Param<f64>) {
        self.0.push((name.to_string(), p.value.clone(), p.grad.clone()));
    }
}

/// Applies `f` to coordinate `coord` of the `index`-th parameter.
struct Poke<F> {
    index: usize,
    seen: usize,
    coord: usize,
    f: F,
}

impl<F: FnMut(&mut f64)> Visitor<f64> for Poke<F> {
    fn param(&mut self, _: &str, p: &mut Param<f64>) {
        if self.seen == self.index {
            (self.f)(&mut p.value.data_mut()[self.coord]);
        }
        self.seen += 1;
    }
}

fn set_param(target: &mut dyn Differentiable, index: usize, coord: usize, value: f64) {
    target.visit_params(&mut Poke {
        index,
        seen: 0,
        coord,
        f: |v: &mut f64| *v = value,
    });
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("gradcheck objective at {what}")))
    }
}

/// Smallest relative error over the configured steps, stopping at the first
/// step within tolerance.
fn ladder(analytic: f64, theta: f64, opts: &GradCheckOptions, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if opts.steps.is_empty() {
        return Err(invalid!("gradcheck needs at least one step"));
    }
    let mut best = f64::INFINITY;
    for &step in &opts.steps {
        let h = step_for(step, theta);
        let numeric = (f(theta + h)? - f(theta - h)?) / (2.0 * h);
        best = best.min(relative_error(analytic, numeric));
        if best < opts.tolerance {
            break;
        }
    }
    Ok(best)
}

pub fn gradcheck(
    name: &str,
    target: &mut dyn Differentiable,
    inputs: &[Tensor4<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = Prng::new(opts.seed);
    let (base, input_grads) = target.objective_grad(inputs)?;
    finite(base, "base point")?;
    if input_grads.len() != inputs.len() {
        return Err(invalid!(
            "{name}: {} input adjoints for {} inputs",
            input_grads.len(),
            inputs.len()
        ));
    }
    let mut params = Vec::new();
    target.visit_params(&mut Collect(&mut params));

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0usize;
    let mut record = |err: f64, label: String| {
        if err > worst.0 || worst.1 == "-" {
            worst = (err.max(worst.0), label);
        }
    };

    let mut perturbed: Vec<Tensor4<f64>> = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(invalid!("{name}: adjoint shape mismatch for input {i}"));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("{name}: analytic adjoint of input {i}")));
        }
        for k in coords(inputs[i].len(), opts.max_coords_per_tensor, &mut rng) {
            let theta = inputs[i].data()[k];
            let err = ladder(grad.data()[k], theta, opts, |v| {
                perturbed[i].data_mut()[k] = v;
                let f = target.objective(&perturbed);
                perturbed[i].data_mut()[k] = theta;
                finite(f?, "perturbed input")
            })?;
            record(err, format!("input{i}[{k}]"));
            checked += 1;
        }
    }

    for (pi, (pname, value, grad)) in params.iter().enumerate() {
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("{name}: analytic gradient of {pname}")));
        }
        for k in coords(value.len(), opts.max_coords_per_tensor, &mut rng) {
            let theta = value.data()[k];
            let err = ladder(grad.data()[k], theta, opts, |v| {
                set_param(target, pi, k, v);
                let f = target.objective(inputs);
                set_param(target, pi, k, theta);
                finite(f?, "perturbed parameter")
            })?;
            record(err, format!("{pname}[{k}]"));
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst.0,
        worst: worst.1,
        coords_checked: checked,
        tolerance: opts.tolerance,
        passed: worst.0 < opts.tolerance,
    })
}

/// Turns a single-output layer into a scalar objective by contracting its
/// output with a fixed random tensor.
pub struct Projected<L> {
    pub layer: L,
    seed: u64,
    projection: Option<Tensor4<f64>>,
}

impl<L> Projected<L> {
    pub fn new(layer: L, seed: u64) -> Self {
        Projected {
            layer,
            seed,
            projection: None,
        }
    }
}

/// Fixed random contraction `sum(r * y)` for the outputs of a target.
pub(crate) fn project(slot: &mut Option<Tensor4<f64>>, seed: u64, y: &Tensor4<f64>) -> Result<(f64, Tensor4<f64>)> {
    let needs_new = slot.as_ref().is_none_or(|p| p.shape() != y.shape());
    if needs_new {
        *slot = Some(Tensor4::randn(y.shape(), &mut Prng::new(seed), 1.0)?);
    }
    let r = slot.as_ref().unwrap();
    let v = r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    Ok((v, r.clone()))
}

impl<L: Layer<f64>> Differentiable for Projected<L> {
    fn objective(&mut self, inputs: &[Tensor4<f64>]) -> Result<f64> {
        let y = self.layer.forward(&inputs[0])?;
        Ok(project(&mut self.projection, self.seed, &y)?.0)
    }

    fn objective_grad(&mut self, inputs: &[Tensor4<f64>]) -> Result<(f64, Vec<Tensor4<f64>>)> {
        crate::nn::module::zero_grads(&mut self.layer);
        let y = self.layer.forward(&inputs[0])?;
        let (v, r) = project(&mut self.projection, self.seed, &y)?;
        let gx = self.layer.backward(&r)?;
        Ok((v, vec![gx]))
    }

    fn visit_params(&mut self, v: &mut dyn Visitor<f64>) {
        self.layer.visit("", v);
    }
}

type ForwardFn = Box<dyn Fn(&Tensor4<f64>) -> Result<Tensor4<f64>> + Send>;
type BackwardFn = Box<dyn Fn(&Tensor4<f64>, &Tensor4<f64>, &Tensor4<f64>) -> Result<Tensor4<f64>> + Send>;

/// A parameter-free primitive given as a forward function and its adjoint
/// `(x, y, grad_y) -> grad_x`.
pub struct FnLayer {
    forward: ForwardFn,
    backward: BackwardFn,
    cache: Option<(Tensor4<f64>, Tensor4<f64>)>,
}

impl FnLayer {
    pub fn new(
        forward: impl Fn(&Tensor4<f64>) -> Result<Tensor4<f64>> + Send + 'static,
        backward: impl Fn(&Tensor4<f64>, &Tensor4<f64>, &Tensor4<f64>) -> Result<Tensor4<f64>> + Send + 'static,
    ) -> Self {
        FnLayer {
            forward: Box::new(forward),
            backward: Box::new(backward),
            cache: None,
        }
    }
}

impl Module<f64> for FnLayer {
    fn visit(&mut self, _: &str, _: &mut dyn Visitor<f64>) {}
}

impl Layer<f64> for FnLayer {
    fn forward(&mut self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let y = (self.forward)(x)?;
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| invalid!("backward before forward"))?;
        (self.backward)(x, y, grad_out)
    }
}

/// Convenience: gradcheck a layer on one input with a projected objective.
pub fn gradcheck_layer<L: Layer<f64>>(
    name: &str,
    layer: L,
    input: Tensor4<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut target = Projected::new(layer, opts.seed ^ 0xA5A5);
    gradcheck(name, &mut target, &[input], opts)
}
