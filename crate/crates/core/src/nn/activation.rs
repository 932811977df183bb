use crate::error::{invalid, shape_err, Result};
use crate::nn::module::{Layer, Module, Visitor};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    /// Softmax over the channel axis at every pixel.
    SoftmaxChannel,
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation_forward<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    let six = T::from_f64(6.0);
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Relu6 => x.map(|v| v.max(T::zero()).min(six)),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::SoftmaxChannel => softmax_channel(x),
    }
}

fn softmax_channel<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x.plane(n, c)[i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x.plane(n, c)[i] - m).exp();
                y.plane_mut(n, c)[i] = e;
                z = z + e;
            }
            for c in 0..s.c {
                let v = &mut y.plane_mut(n, c)[i];
                *v = *v / z;
            }
        }
    }
    y
}

/// Adjoint given the forward input `x` and output `y`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    kind: Activation,
) -> Result<Tensor4<T>> {
    if grad_out.shape() != x.shape() || y.shape() != x.shape() {
        return Err(shape_err!(
            "activation backward got grad {} for input {}",
            grad_out.shape(),
            x.shape()
        ));
    }
    let six = T::from_f64(6.0);
    let zero = T::zero();
    let gx: Vec<T> = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > zero { g } else { zero })
            .collect(),
        Activation::Relu6 => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > zero && v < six { g } else { zero })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
        Activation::SoftmaxChannel => {
            let s = x.shape();
            let mut gx = Tensor4::zeros(s);
            for n in 0..s.n {
                for i in 0..s.plane() {
                    let mut dot = zero;
                    for c in 0..s.c {
                        dot = dot + y.plane(n, c)[i] * grad_out.plane(n, c)[i];
                    }
                    for c in 0..s.c {
                        gx.plane_mut(n, c)[i] = y.plane(n, c)[i] * (grad_out.plane(n, c)[i] - dot);
                    }
                }
            }
            return Ok(gx);
        }
    };
    Tensor4::from_vec(x.shape(), gx)
}

#[derive(Clone, Debug)]
pub struct ActivationLayer<T> {
    pub kind: Activation,
    cache: Option<(Tensor4<T>, Tensor4<T>)>,
}

impl<T: Scalar> ActivationLayer<T> {
    pub fn new(kind: Activation) -> Self {
        ActivationLayer { kind, cache: None }
    }
}

impl<T: Scalar> Module<T> for ActivationLayer<T> {
    fn visit(&mut self, _: &str, _: &mut dyn Visitor<T>) {}
}

impl<T: Scalar> Layer<T> for ActivationLayer<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = activation_forward(x, self.kind);
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (x, y) = self
            .cache
            .as_ref()
            .ok_or_else(|| invalid!("activation backward called before forward"))?;
        activation_backward(x, y, grad_out, self.kind)
    }
}
