//! Nearest 2x and bilinear upsampling.
//!
//! Bilinear uses the half-pixel (align-corners = false) convention: output
//! coordinate `o` samples the source at `(o + 0.5) * in / out - 0.5`,
//! clamped below at 0, with the upper neighbour clamped to the last row or
//! column.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor4};

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let os = s.with_hw(2 * s.h, 2 * s.w);
    let mut y = Tensor4::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for oy in 0..os.h {
                let row = &src[(oy / 2) * s.w..(oy / 2 + 1) * s.w];
                for ox in 0..os.w {
                    dst[oy * os.w + ox] = row[ox / 2];
                }
            }
        }
    }
    y
}

/// Adjoint of nearest 2x: sums each aligned 2x2 block.
pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let os = grad_out.shape();
    if !os.h.is_multiple_of(2) || !os.w.is_multiple_of(2) {
        return Err(shape_err!("nearest2x backward needs even spatial dims, got {os}"));
    }
    let s = os.with_hw(os.h / 2, os.w / 2);
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let a = g[(2 * y) * os.w + 2 * x];
                    let b = g[(2 * y) * os.w + 2 * x + 1];
                    let cc = g[(2 * y + 1) * os.w + 2 * x];
                    let d = g[(2 * y + 1) * os.w + 2 * x + 1];
                    dst[y * s.w + x] = a + b + cc + d;
                }
            }
        }
    }
    Ok(gx)
}

/// Interpolation taps along one axis: `(i0, i1, weight of i1)`.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor4<T>, target_h: usize, target_w: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if target_h < s.h || target_w < s.w {
        return Err(invalid!(
            "bilinear upsample cannot downscale {s} to {target_h}x{target_w}"
        ));
    }
    if target_h == s.h && target_w == s.w {
        return Ok(x.clone());
    }
    let ty = taps(s.h, target_h);
    let tx = taps(s.w, target_w);
    let os = s.with_hw(target_h, target_w);
    let mut y = Tensor4::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let hx = T::one() - lx;
                    dst[oy * os.w + ox] = hy * (hx * src[y0 * s.w + x0] + lx * src[y0 * s.w + x1])
                        + ly * (hx * src[y1 * s.w + x0] + lx * src[y1 * s.w + x1]);
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`upsample_bilinear`] back to `(src_h, src_w)`.
pub fn upsample_bilinear_backward<T: Scalar>(grad_out: &Tensor4<T>, src_h: usize, src_w: usize) -> Result<Tensor4<T>> {
    let os = grad_out.shape();
    if os.h < src_h || os.w < src_w {
        return Err(invalid!("bilinear backward from {os} to {src_h}x{src_w}"));
    }
    if os.h == src_h && os.w == src_w {
        return Ok(grad_out.clone());
    }
    let ty = taps(src_h, os.h);
    let tx = taps(src_w, os.w);
    let s = os.with_hw(src_h, src_w);
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let hx = T::one() - lx;
                    let v = g[oy * os.w + ox];
                    dst[y0 * s.w + x0] = dst[y0 * s.w + x0] + hy * hx * v;
                    dst[y0 * s.w + x1] = dst[y0 * s.w + x1] + hy * lx * v;
                    dst[y1 * s.w + x0] = dst[y1 * s.w + x0] + ly * hx * v;
                    dst[y1 * s.w + x1] = dst[y1 * s.w + x1] + ly * lx * v;
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use crate::tensor::shape;

    #[test]
    fn nearest_single_value() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 1), vec![5.0f32]).unwrap();
        assert_eq!(upsample_nearest2x(&x).data(), &[5.0; 4]);
    }

    #[test]
    fn nearest_backward_of_ones_is_four() {
        let g = Tensor4::<f64>::ones(shape(2, 3, 6, 4));
        let gx = upsample_nearest2x_backward(&g).unwrap();
        assert_eq!(gx.shape(), shape(2, 3, 3, 2));
        assert!(gx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn nearest_blocks_are_constant() {
        let x = Tensor4::<f64>::randn(shape(1, 2, 3, 5), &mut Prng::new(1), 1.0).unwrap();
        let y = upsample_nearest2x(&x);
        for c in 0..2 {
            for by in 0..3 {
                for bx in 0..5 {
                    let v = y.get(0, c, 2 * by, 2 * bx);
                    assert_eq!(y.get(0, c, 2 * by + 1, 2 * bx), v);
                    assert_eq!(y.get(0, c, 2 * by, 2 * bx + 1), v);
                    assert_eq!(y.get(0, c, 2 * by + 1, 2 * bx + 1), v);
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor4::<f64>::randn(shape(1, 2, 4, 4), &mut Prng::new(2), 1.0).unwrap();
        assert_eq!(upsample_bilinear(&x, 4, 4).unwrap(), x);
        let c = Tensor4::<f64>::full(shape(1, 1, 3, 5), 2.5);
        let y = upsample_bilinear(&c, 12, 17).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_half_pixel_values() {
        // 2 -> 4 along a row [0, 1]: sample points -0.25(clamped), 0.25, 0.75, 1.25
        let x = Tensor4::from_vec(shape(1, 1, 1, 2), vec![0.0f64, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_rejects_downscale() {
        let x = Tensor4::<f64>::zeros(shape(1, 1, 4, 4));
        assert!(upsample_bilinear(&x, 2, 4).is_err());
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = Prng::new(9);
        let x = Tensor4::<f64>::randn(shape(1, 2, 3, 4), &mut rng, 1.0).unwrap();
        let g = Tensor4::<f64>::randn(shape(1, 2, 7, 9), &mut rng, 1.0).unwrap();
        let y = upsample_bilinear(&x, 7, 9).unwrap();
        let gx = upsample_bilinear_backward(&g, 3, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
