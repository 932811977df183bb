//! Phantoms, volume preprocessing, NPY files, manifests and batching.

pub mod manifest;
pub mod npy;
pub mod phantom;
pub mod preprocess;
pub mod split;
pub mod volume;

use serde::{Deserialize, Serialize};

pub use manifest::{write_dataset, DatasetMeta, DatasetWriter, Manifest, ManifestRecord};
pub use npy::{read_array, write_array, NpyArray, NpyData};
pub use phantom::{synth_phantom, Phantom};
pub use preprocess::{preprocess_volume, to_rgb_normalized, PreprocessOptions, SliceRecord, VolumeRecord};
pub use split::{split_patients, Split, DEFAULT_TRAIN_FRACTION};
pub use volume::{preprocess_dir, read_volume, synth_volume, write_volume, PreprocessSummary, VolumeDirOptions};

use crate::error::{invalid, shape_err, Result};
use crate::rng::Prng;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub difficulty: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 200,
            size: 64,
            difficulty: 0.5,
        }
    }
}

/// Phantom `i` becomes patient `synth-<i>` with a single slice.
pub fn synthetic_slices(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<SliceRecord>> {
    if cfg.count == 0 {
        return Err(invalid!("synthetic count must be >= 1"));
    }
    let mut rng = Prng::new(seed);
    (0..cfg.count)
        .map(|i| {
            let p = synth_phantom(&mut rng, cfg.size, cfg.difficulty)?;
            let shape = crate::tensor::Shape::new(1, 1, p.size, p.size)?;
            Ok(SliceRecord {
                patient_id: format!("synth-{i:04}"),
                slice_index: 0,
                image: to_rgb_normalized(&p.image, p.size, p.size)?,
                mask: Tensor4::from_vec(shape, p.mask.iter().map(|&m| m as f32).collect())?,
            })
        })
        .collect()
}

/// Assigns every slice the split of its patient.
pub fn assign_splits(slices: Vec<SliceRecord>, fraction: f64, seed: u64) -> Result<Vec<(SliceRecord, Split)>> {
    let mut ids: Vec<String> = slices.iter().map(|s| s.patient_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let (train, _) = split_patients(&ids, fraction, seed)?;
    Ok(slices
        .into_iter()
        .map(|s| {
            let split = if train.binary_search(&s.patient_id).is_ok() {
                Split::Train
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect())
}

/// Stacks the given slices into `(n, 3, h, w)` images and `(n, 1, h, w)` masks.
pub fn make_batch(slices: &[SliceRecord], idx: &[usize]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let first = idx.first().ok_or_else(|| invalid!("empty batch"))?;
    let s0 = &slices[*first];
    for &i in idx {
        if slices[i].image.shape() != s0.image.shape() {
            return Err(shape_err!(
                "slice {} of {} has shape {}, batch expects {}",
                slices[i].slice_index,
                slices[i].patient_id,
                slices[i].image.shape(),
                s0.image.shape()
            ));
        }
    }
    let images: Vec<&Tensor4<f32>> = idx.iter().map(|&i| &slices[i].image).collect();
    let masks: Vec<&Tensor4<f32>> = idx.iter().map(|&i| &slices[i].mask).collect();
    Ok((Tensor4::concat_batch(&images)?, Tensor4::concat_batch(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_is_patient_level() {
        let cfg = SyntheticConfig {
            count: 20,
            size: 16,
            difficulty: 0.2,
        };
        let s = assign_splits(synthetic_slices(&cfg, 3).unwrap(), 0.8, 3).unwrap();
        assert_eq!(s.iter().filter(|(_, sp)| *sp == Split::Train).count(), 16);
        let (img, mask) = make_batch(&s.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), &[0, 5, 7]).unwrap();
        assert_eq!(img.shape().n, 3);
        assert_eq!(mask.shape().c, 1);
    }
}
