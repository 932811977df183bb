//! Volume to slice conversion: percentile clipping, min-max scaling, RGB
//! replication, ImageNet standardization and binary masks.

use serde::{Deserialize, Serialize};

use crate::data::npy::NpyArray;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// A 3D scan `(h, w, slices)` in C order with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub patient_id: String,
    pub dims: [usize; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

impl VolumeRecord {
    pub fn new(patient_id: impl Into<String>, dims: [usize; 3], image: Vec<f32>, label: Vec<u8>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if n == 0 || image.len() != n || label.len() != n {
            return Err(shape_err!(
                "volume {dims:?} needs {n} voxels, got image {} and label {}",
                image.len(),
                label.len()
            ));
        }
        if let Some(v) = label.iter().find(|v| !LABEL_VALUES.contains(v)) {
            return Err(invalid!("label value {v} outside {LABEL_VALUES:?}"));
        }
        if let Some(i) = image.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image voxel {i} is not finite")));
        }
        Ok(VolumeRecord {
            patient_id: patient_id.into(),
            dims,
            image,
            label,
        })
    }

    /// Builds a record from NPY arrays. A rank-4 image `(h, w, slices,
    /// modalities)` is reduced to the modality at `modality`.
    pub fn from_arrays(patient_id: &str, image: &NpyArray, label: &NpyArray, modality: usize) -> Result<Self> {
        let values = image.data.to_f64();
        let (dims, image) = match image.shape.as_slice() {
            [_, _, _] if modality != 0 => {
                return Err(invalid!(
                    "modality {modality} requested but the image has a single modality"
                ))
            }
            [h, w, s] => ([*h, *w, *s], values.iter().map(|&v| v as f32).collect()),
            [h, w, s, m] => {
                if modality >= *m {
                    return Err(invalid!("modality {modality} out of range for {m} modalities"));
                }
                let picked = values.iter().skip(modality).step_by(*m).map(|&v| v as f32).collect();
                ([*h, *w, *s], picked)
            }
            other => return Err(shape_err!("image volume must have rank 3 or 4, got shape {other:?}")),
        };
        if label.shape != dims {
            return Err(shape_err!("label shape {:?} differs from image {dims:?}", label.shape));
        }
        let label = label
            .data
            .to_f64()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && LABEL_VALUES.contains(&(v as u8)) && (0.0..=4.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(invalid!("label value {v} outside {LABEL_VALUES:?}"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        VolumeRecord::new(patient_id, dims, image, label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub drop_empty: bool,
    /// Lower and upper clipping percentiles.
    pub clip_percentiles: (f64, f64),
    /// Center crop to a square of this side, if set.
    pub crop: Option<usize>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            drop_empty: false,
            clip_percentiles: (1.0, 99.0),
            crop: None,
        }
    }
}

/// One 2D training example: `(1, 3, h, w)` standardized image and
/// `(1, 1, h, w)` binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub image: Tensor4<f32>,
    pub mask: Tensor4<f32>,
}

/// Percentile with linear interpolation between closest ranks of sorted data.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Range of per-channel values a standardized `[0, 1]` image can take.
pub fn normalized_bounds(c: usize) -> (f32, f32) {
    (
        (0.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
        (1.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
    )
}

/// Replicates a row-major `[0, 1]` image into three standardized channels.
pub fn to_rgb_normalized(gray: &[f32], h: usize, w: usize) -> Result<Tensor4<f32>> {
    if gray.len() != h * w {
        return Err(shape_err!("gray image of {} values is not {h}x{w}", gray.len()));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(
            gray.iter()
                .map(|&v| (v.clamp(0.0, 1.0) - IMAGENET_MEAN[c]) / IMAGENET_STD[c]),
        );
    }
    Tensor4::from_vec(Shape::new(1, 3, h, w)?, data)
}

fn crop_window(h: usize, w: usize, crop: Option<usize>) -> Result<(usize, usize, usize, usize)> {
    match crop {
        None => Ok((0, 0, h, w)),
        Some(c) if c == 0 || c > h || c > w => Err(invalid!("crop {c} does not fit a {h}x{w} slice")),
        Some(c) => Ok(((h - c) / 2, (w - c) / 2, c, c)),
    }
}

pub fn preprocess_volume(v: &VolumeRecord, opts: &PreprocessOptions) -> Result<Vec<SliceRecord>> {
    let [h, w, s] = v.dims;
    let mut sorted = v.image.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    let (min, max) = (sorted[0] as f64, sorted[sorted.len() - 1] as f64);
    if min == max {
        return Err(invalid!("volume {} is constant ({min}); cannot scale", v.patient_id));
    }
    let (q_lo, q_hi) = opts.clip_percentiles;
    if !(0.0 <= q_lo && q_lo < q_hi && q_hi <= 100.0) {
        return Err(invalid!(
            "clip percentiles must satisfy 0 <= lo < hi <= 100, got ({q_lo}, {q_hi})"
        ));
    }
    let (mut lo, mut hi) = (percentile(&sorted, q_lo), percentile(&sorted, q_hi));
    if lo == hi {
        (lo, hi) = (min, max);
    }
    drop(sorted);
    let (y0, x0, ch, cw) = crop_window(h, w, opts.crop)?;
    let mut out = Vec::new();
    let mut gray = vec![0f32; ch * cw];
    let mut mask = vec![0f32; ch * cw];
    for k in 0..s {
        for y in 0..ch {
            for x in 0..cw {
                let src = ((y0 + y) * w + (x0 + x)) * s + k;
                let clipped = (v.image[src] as f64).clamp(lo, hi);
                gray[y * cw + x] = ((clipped - lo) / (hi - lo)) as f32;
                mask[y * cw + x] = if v.label[src] > 0 { 1.0 } else { 0.0 };
            }
        }
        if opts.drop_empty && mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let image = to_rgb_normalized(&gray, ch, cw)?;
        for c in 0..3 {
            let (a, b) = normalized_bounds(c);
            debug_assert!(image.plane(0, c).iter().all(|&p| p >= a - 1e-5 && p <= b + 1e-5));
        }
        out.push(SliceRecord {
            patient_id: v.patient_id.clone(),
            slice_index: k,
            image,
            mask: Tensor4::from_vec(Shape::new(1, 1, ch, cw)?, mask.clone())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn volume(dims: [usize; 3], label_fn: impl Fn(usize) -> u8) -> VolumeRecord {
        let mut rng = Prng::new(1);
        let n = dims.iter().product();
        let image = (0..n).map(|_| rng.normal() as f32 * 100.0 + 500.0).collect();
        let label = (0..n).map(label_fn).collect();
        VolumeRecord::new("p", dims, image, label).unwrap()
    }

    #[test]
    fn one_record_per_slice() {
        let v = volume([12, 10, 7], |_| 0);
        let r = preprocess_volume(&v, &PreprocessOptions::default()).unwrap();
        assert_eq!(r.len(), 7);
        assert_eq!(r[3].slice_index, 3);
        assert_eq!(r[0].image.shape(), Shape::new(1, 3, 12, 10).unwrap());
    }

    #[test]
    fn label_four_maps_to_ones_and_empty_slices_drop() {
        let s = 4;
        let v = volume([6, 6, s], |i| if i % s == 2 { 4 } else { 0 });
        let r = preprocess_volume(&v, &PreprocessOptions::default()).unwrap();
        assert!(r[2].mask.data().iter().all(|&m| m == 1.0));
        assert!(r[1].mask.data().iter().all(|&m| m == 0.0));
        let opts = PreprocessOptions {
            drop_empty: true,
            ..Default::default()
        };
        let kept = preprocess_volume(&v, &opts).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].slice_index, 2);
    }

    #[test]
    fn normalized_values_bounded_and_channels_differ_only_by_constants() {
        let v = volume([8, 8, 3], |_| 1);
        for rec in preprocess_volume(&v, &PreprocessOptions::default()).unwrap() {
            for c in 0..3 {
                let (a, b) = normalized_bounds(c);
                assert!(rec.image.plane(0, c).iter().all(|&p| p >= a - 1e-6 && p <= b + 1e-6));
            }
            let g0 = rec.image.plane(0, 0)[5] * IMAGENET_STD[0] + IMAGENET_MEAN[0];
            let g2 = rec.image.plane(0, 2)[5] * IMAGENET_STD[2] + IMAGENET_MEAN[2];
            assert!((g0 - g2).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_and_bad_labels_error() {
        let n = 4 * 4 * 2;
        let v = VolumeRecord::new("c", [4, 4, 2], vec![3.0; n], vec![0; n]).unwrap();
        assert!(preprocess_volume(&v, &PreprocessOptions::default()).is_err());
        assert!(VolumeRecord::new("b", [4, 4, 2], vec![0.0; n], vec![3; n]).is_err());
    }

    #[test]
    fn percentile_interpolates_like_numpy() {
        let v = [1.0f32, 2.0, 3.0, 4.0, 10.0];
        // numpy.percentile(v, [1, 50, 99]) == [1.04, 3.0, 9.76]
        assert!((percentile(&v, 1.0) - 1.04).abs() < 1e-12);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 99.0) - 9.76).abs() < 1e-12);
    }

    #[test]
    fn center_crop() {
        let v = volume([10, 10, 1], |i| u8::from(i == 0) * 2);
        let opts = PreprocessOptions {
            crop: Some(6),
            ..Default::default()
        };
        let r = preprocess_volume(&v, &opts).unwrap();
        assert_eq!(r[0].mask.shape(), Shape::new(1, 1, 6, 6).unwrap());
        assert!(r[0].mask.data().iter().all(|&m| m == 0.0));
        let too_big = PreprocessOptions {
            crop: Some(11),
            ..Default::default()
        };
        assert!(preprocess_volume(&v, &too_big).is_err());
    }

    #[test]
    fn rank4_selects_modality() {
        use crate::data::npy::NpyData;
        let (h, w, s, m) = (2, 2, 1, 3);
        let img: Vec<f32> = (0..h * w * s * m).map(|i| i as f32).collect();
        let image = NpyArray::new(vec![h, w, s, m], NpyData::F32(img)).unwrap();
        let label = NpyArray::new(vec![h, w, s], NpyData::U8(vec![0, 1, 2, 4])).unwrap();
        let v = VolumeRecord::from_arrays("p", &image, &label, 2).unwrap();
        assert_eq!(v.image, vec![2.0, 5.0, 8.0, 11.0]);
        assert!(VolumeRecord::from_arrays("p", &image, &label, 3).is_err());
    }
}
