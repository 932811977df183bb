use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Per-channel spatial reduction to `(n, c, 1, 1)`.
pub fn pool_global<T: Scalar>(x: &Tensor4<T>, kind: PoolKind) -> Tensor4<T> {
    let s = x.shape();
    let count = T::from_f64(s.plane() as f64);
    let data = (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| {
            let plane = x.plane(n, c);
            match kind {
                PoolKind::Avg => plane.iter().fold(T::zero(), |a, &v| a + v) / count,
                PoolKind::Max => plane.iter().fold(T::neg_infinity(), |a, &v| a.max(v)),
            }
        })
        .collect();
    Tensor4::from_vec(s.with_hw(1, 1), data).expect("pooled shape")
}

/// Adjoint of [`pool_global`]. Max routes the gradient to the first
/// maximal element in row-major order.
pub fn pool_global_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>, kind: PoolKind) -> Result<Tensor4<T>> {
    let s = x.shape();
    if grad_out.shape() != s.with_hw(1, 1) {
        return Err(shape_err!(
            "global pool backward got grad {} for input {s}",
            grad_out.shape()
        ));
    }
    let count = T::from_f64(s.plane() as f64);
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.get(n, c, 0, 0);
            match kind {
                PoolKind::Avg => gx.plane_mut(n, c).iter_mut().for_each(|v| *v = g / count),
                PoolKind::Max => {
                    let plane = x.plane(n, c);
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    gx.plane_mut(n, c)[best] = g;
                }
            }
        }
    }
    Ok(gx)
}
