use crate::error::Result;
use crate::nn::batchnorm::BatchNormState;
use crate::tensor::{Scalar, Shape, Tensor4};

/// A trainable tensor and its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(Tensor4::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Walks the tensors owned by a module. Names are dotted paths such as
/// `decoder.stage3.lgag.gate_conv.weight`.
pub trait Visitor<T: Scalar> {
    fn param(&mut self, name: &str, param: &mut Param<T>);

    /// Non-trained state (batch-norm running statistics).
    fn buffer(&mut self, _name: &str, _value: &mut Tensor4<T>) {}

    fn batchnorm(&mut self, name: &str, bn: &mut BatchNormState<T>) {
        self.param(&format!("{name}.gamma"), &mut bn.gamma);
        self.param(&format!("{name}.beta"), &mut bn.beta);
        self.buffer(&format!("{name}.running_mean"), &mut bn.running_mean);
        self.buffer(&format!("{name}.running_var"), &mut bn.running_var);
    }
}

pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);
}

/// A single-input, single-output differentiable layer. `backward` uses the
/// state cached by the most recent `forward`, returns the input adjoint and
/// accumulates parameter gradients.
pub trait Layer<T: Scalar>: Module<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>>;
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct ParamFn<F>(F);

impl<T: Scalar, F: FnMut(&str, &mut Param<T>)> Visitor<T> for ParamFn<F> {
    fn param(&mut self, name: &str, param: &mut Param<T>) {
        (self.0)(name, param)
    }
}

/// Calls `f` for every trainable parameter in visiting order.
pub fn for_each_param<T: Scalar>(m: &mut (impl Module<T> + ?Sized), f: impl FnMut(&str, &mut Param<T>)) {
    m.visit("", &mut ParamFn(f));
}

pub fn zero_grads<T: Scalar>(m: &mut (impl Module<T> + ?Sized)) {
    for_each_param(m, |_, p| p.zero_grad());
}

struct ModeSetter(Mode);

impl<T: Scalar> Visitor<T> for ModeSetter {
    fn param(&mut self, _: &str, _: &mut Param<T>) {}
    fn batchnorm(&mut self, _: &str, bn: &mut BatchNormState<T>) {
        bn.mode = self.0;
    }
}

pub fn set_mode<T: Scalar>(m: &mut (impl Module<T> + ?Sized), mode: Mode) {
    m.visit("", &mut ModeSetter(mode));
}

/// Number of trainable scalars (running statistics excluded).
pub fn param_count<T: Scalar>(m: &mut (impl Module<T> + ?Sized)) -> usize {
    let mut total = 0;
    for_each_param(m, |_, p| total += p.value.len());
    total
}
