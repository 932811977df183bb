use crate::error::{invalid, shape_err, Result};
use crate::nn::module::{Layer, Mode, Module, Param, Visitor};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 / variance 1, eps 1e-5,
    /// momentum 0.1, train mode.
    pub fn new(channels: usize) -> Result<Self> {
        let s = Shape::new(1, channels, 1, 1)?;
        Ok(BatchNormState {
            gamma: Param::new(Tensor4::ones(s)),
            beta: Param::zeros(s),
            running_mean: Tensor4::zeros(s),
            running_var: Tensor4::ones(s),
            eps: 1e-5,
            momentum: 0.1,
            mode: Mode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            state: BatchNormState::new(channels)?,
            cache: None,
        })
    }
}

/// Batch normalization. Train mode standardizes each channel with the
/// biased batch variance and folds the unbiased variance into the running
/// estimate; eval mode reads the running statistics and never mutates them.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor4<T>,
    s: &mut BatchNormState<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let xs = x.shape();
    if xs.c != s.channels() {
        return Err(shape_err!("batchnorm over {} channels got input {xs}", s.channels()));
    }
    let m = xs.n * xs.plane();
    let eps = T::from_f64(s.eps);
    let mut x_hat = Tensor4::zeros(xs);
    let mut inv_std = vec![T::zero(); xs.c];
    let mut y = Tensor4::zeros(xs);

    for c in 0..xs.c {
        let (mean, var) = match s.mode {
            Mode::Train => {
                if m < 2 {
                    return Err(invalid!(
                        "batchnorm in train mode needs at least 2 values per channel, input {xs}"
                    ));
                }
                let mf = T::from_f64(m as f64);
                let mut sum = T::zero();
                for n in 0..xs.n {
                    sum = x.plane(n, c).iter().fold(sum, |a, &v| a + v);
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for n in 0..xs.n {
                    sq = x.plane(n, c).iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
                }
                let var = sq / mf;
                let mom = T::from_f64(s.momentum);
                let unbiased = var * mf / T::from_f64((m - 1) as f64);
                let rm = &mut s.running_mean.data_mut()[c];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut s.running_var.data_mut()[c];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
                (mean, var)
            }
            Mode::Eval => (s.running_mean.data()[c], s.running_var.data()[c]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        let g = s.gamma.value.data()[c];
        let b = s.beta.value.data()[c];
        for n in 0..xs.n {
            let src = x.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mean) * istd;
            }
            let xh = x_hat.plane(n, c).to_vec();
            for (d, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    Ok((y, x_hat, inv_std))
}

pub fn batchnorm_backward<T: Scalar>(
    s: &mut BatchNormState<T>,
    x_hat: &Tensor4<T>,
    inv_std: &[T],
    mode: Mode,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let xs = x_hat.shape();
    if grad_out.shape() != xs {
        return Err(shape_err!("batchnorm backward got grad {} for {xs}", grad_out.shape()));
    }
    let m = T::from_f64((xs.n * xs.plane()) as f64);
    let mut gx = Tensor4::zeros(xs);
    for c in 0..xs.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for n in 0..xs.n {
            for (&dy, &xh) in grad_out.plane(n, c).iter().zip(x_hat.plane(n, c)) {
                sum_dy = sum_dy + dy;
                sum_dy_xh = sum_dy_xh + dy * xh;
            }
        }
        let gb = &mut s.beta.grad.data_mut()[c];
        *gb = *gb + sum_dy;
        let gg = &mut s.gamma.grad.data_mut()[c];
        *gg = *gg + sum_dy_xh;

        let gamma = s.gamma.value.data()[c];
        let istd = inv_std[c];
        for n in 0..xs.n {
            let dy = grad_out.plane(n, c);
            let xh = x_hat.plane(n, c);
            let out = gx.plane_mut(n, c);
            match mode {
                Mode::Train => {
                    let k = gamma * istd / m;
                    for i in 0..out.len() {
                        out[i] = k * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                }
                Mode::Eval => {
                    for i in 0..out.len() {
                        out[i] = gamma * istd * dy[i];
                    }
                }
            }
        }
    }
    Ok(gx)
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.batchnorm(prefix, &mut self.state);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, x_hat, inv_std) = batchnorm_forward(x, &mut self.state)?;
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            mode: self.state.mode,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| invalid!("batchnorm backward called before forward"))?;
        batchnorm_backward(&mut self.state, &cache.x_hat, &cache.inv_std, cache.mode, grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use crate::tensor::shape;

    #[test]
    fn standardized_input_is_fixed_point() {
        // Each channel holds {-1, 1} repeated: mean 0, biased variance 1.
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let x = Tensor4::from_vec(shape(2, 3, 2, 2), data).unwrap();
        let mut bn = BatchNorm2d::<f64>::new(3).unwrap();
        let y = bn.forward(&x).unwrap();
        // 1/sqrt(1 + 1e-5) differs from 1 by 5e-6 relative
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    #[test]
    fn constant_channel_yields_beta() {
        let x = Tensor4::<f64>::full(shape(2, 2, 3, 3), 4.0);
        let mut bn = BatchNorm2d::<f64>::new(2).unwrap();
        bn.state.beta.value.fill(0.5);
        let y = bn.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor4::<f64>::randn(shape(4, 3, 5, 5), &mut Prng::new(8), 3.0)
            .unwrap()
            .map(|v| v + 2.0);
        let mut bn = BatchNorm2d::<f64>::new(3).unwrap();
        let y = bn.forward(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn single_value_per_channel_in_train_mode_errors() {
        let x = Tensor4::<f32>::ones(shape(1, 2, 1, 1));
        let mut bn = BatchNorm2d::<f32>::new(2).unwrap();
        assert!(bn.forward(&x).is_err());
        bn.state.mode = Mode::Eval;
        assert!(bn.forward(&x).is_ok());
    }

    #[test]
    fn eval_mode_does_not_touch_running_stats() {
        let x = Tensor4::<f64>::randn(shape(2, 2, 3, 3), &mut Prng::new(1), 1.0).unwrap();
        let mut bn = BatchNorm2d::<f64>::new(2).unwrap();
        bn.forward(&x).unwrap();
        let (rm, rv) = (bn.state.running_mean.clone(), bn.state.running_var.clone());
        assert_ne!(rm.data(), &[0.0, 0.0]);
        bn.state.mode = Mode::Eval;
        bn.forward(&x).unwrap();
        assert_eq!(bn.state.running_mean, rm);
        assert_eq!(bn.state.running_var, rv);
        assert!(rv.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1).unwrap();
        bn.state.mode = Mode::Eval;
        bn.state.running_mean.fill(1.0);
        bn.state.running_var.fill(4.0);
        let x = Tensor4::from_vec(shape(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
