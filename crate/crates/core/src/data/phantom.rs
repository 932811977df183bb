//! Synthetic grayscale phantoms: noisy background with one to three bright
//! ellipses whose union is the ground-truth mask.

use crate::error::{invalid, Result};
use crate::rng::Prng;

pub const MIN_SIZE: usize = 16;
pub const MIN_FRACTION: f64 = 0.01;
pub const MAX_FRACTION: f64 = 0.4;
pub const BACKGROUND: f64 = 0.25;
/// Noise standard deviation per unit of difficulty.
pub const NOISE_PER_DIFFICULTY: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub size: usize,
    /// Row-major intensities.
    pub image: Vec<f32>,
    /// Row-major `{0, 1}` labels.
    pub mask: Vec<u8>,
}

impl Phantom {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    offset: f64,
}

impl Ellipse {
    fn sample(rng: &mut Prng, size: f64) -> Self {
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        Ellipse {
            cy: rng.uniform(0.2, 0.8) * size,
            cx: rng.uniform(0.2, 0.8) * size,
            ry: rng.uniform(0.06, 0.28) * size,
            rx: rng.uniform(0.06, 0.28) * size,
            cos: angle.cos(),
            sin: angle.sin(),
            offset: rng.uniform(0.35, 0.65),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Draws ellipse sets until the mask covers between 1% and 40% of the
/// image, then adds Gaussian noise with standard deviation
/// `NOISE_PER_DIFFICULTY * difficulty`.
pub fn synth_phantom(rng: &mut Prng, size: usize, difficulty: f64) -> Result<Phantom> {
    if size < MIN_SIZE {
        return Err(invalid!("phantom size must be >= {MIN_SIZE}, got {size}"));
    }
    if !(difficulty.is_finite() && difficulty >= 0.0) {
        return Err(invalid!("difficulty must be a finite value >= 0, got {difficulty}"));
    }
    let n = size * size;
    let mut offset = vec![0.0f64; n];
    let mut mask = vec![0u8; n];
    loop {
        let count = 1 + rng.below(3);
        let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::sample(rng, size as f64)).collect();
        offset.iter_mut().for_each(|o| *o = 0.0);
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                for e in ellipses.iter().filter(|e| e.contains(py, px)) {
                    offset[y * size + x] = offset[y * size + x].max(e.offset);
                }
            }
        }
        for (m, &o) in mask.iter_mut().zip(&offset) {
            *m = u8::from(o > 0.0);
        }
        let fraction = mask.iter().filter(|&&m| m == 1).count() as f64 / n as f64;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
            break;
        }
    }
    let sigma = NOISE_PER_DIFFICULTY * difficulty;
    let image = offset
        .iter()
        .map(|&o| {
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            (BACKGROUND + o + noise) as f32
        })
        .collect();
    Ok(Phantom { size, image, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_phantom() {
        let a = synth_phantom(&mut Prng::new(9), 64, 0.5).unwrap();
        let b = synth_phantom(&mut Prng::new(9), 64, 0.5).unwrap();
        assert_eq!(a, b);
        let c = synth_phantom(&mut Prng::new(10), 64, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_ellipses_are_brighter() {
        let p = synth_phantom(&mut Prng::new(1), 32, 0.0).unwrap();
        let bg = p
            .image
            .iter()
            .zip(&p.mask)
            .filter(|(_, &m)| m == 0)
            .map(|(&v, _)| v)
            .fold(f32::MIN, f32::max);
        let fg = p
            .image
            .iter()
            .zip(&p.mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&v, _)| v)
            .fold(f32::MAX, f32::min);
        assert!(fg > bg);
    }

    #[test]
    fn fractions_bounded_over_many_draws() {
        let mut rng = Prng::new(77);
        for _ in 0..1000 {
            let f = synth_phantom(&mut rng, 64, 0.5).unwrap().mask_fraction();
            assert!((MIN_FRACTION..=MAX_FRACTION).contains(&f), "{f}");
        }
    }

    #[test]
    fn rejects_small_size_and_bad_difficulty() {
        assert!(synth_phantom(&mut Prng::new(0), 8, 0.5).is_err());
        assert!(synth_phantom(&mut Prng::new(0), 32, -1.0).is_err());
        assert!(synth_phantom(&mut Prng::new(0), 32, f64::NAN).is_err());
    }
}
