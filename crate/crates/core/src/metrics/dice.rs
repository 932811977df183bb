use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor4};

fn count_binary<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|&x| x != T::zero() && x != T::one()) {
        Some(i) => Err(invalid!("{what} mask is not binary: value {} at {i}", v[i].as_f64())),
        None => Ok(()),
    }
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice_score<T: Scalar>(pred: &[T], gt: &[T]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err!(
            "dice: prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        ));
    }
    count_binary(pred, "predicted")?;
    count_binary(gt, "ground-truth")?;
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == T::one(), g == T::one());
        inter += u64::from(p && g);
        a += u64::from(p);
        b += u64::from(g);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-sample Dice of two `(n, 1, h, w)` mask batches.
pub fn dice_per_sample<T: Scalar>(pred: &Tensor4<T>, gt: &Tensor4<T>) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("dice: shapes {} and {} differ", pred.shape(), gt.shape()));
    }
    (0..pred.shape().n)
        .map(|i| dice_score(pred.sample(i), gt.sample(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conventions() {
        let one = [1.0f32, 1.0, 0.0];
        assert_eq!(dice_score(&one, &one).unwrap(), 1.0);
        assert_eq!(dice_score(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dice_score(&[0.0f32; 5], &[0.0; 5]).unwrap(), 1.0);
        let p = [1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0];
        let g = [0.0f32, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(dice_score(&[0.5f32], &[1.0]).is_err());
        assert!(dice_score(&[1.0f32], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let a: Vec<f64> = bits.iter().map(|b| b.0 as f64).collect();
            let b: Vec<f64> = bits.iter().map(|b| b.1 as f64).collect();
            prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        }
    }
}
