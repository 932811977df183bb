//! Volume directories: `<dir>/<patient_id>/{image,label}.npy`, a synthetic
//! scan generator and whole-directory preprocessing.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetMeta, DatasetWriter, Manifest, FORMAT_VERSION};
use crate::data::npy::{read_array, write_array, NpyArray, NpyData};
use crate::data::preprocess::{preprocess_volume, PreprocessOptions, VolumeRecord};
use crate::data::split::{split_patients, Split, DEFAULT_TRAIN_FRACTION};
use crate::error::{invalid, Error, Result};
use crate::rng::Prng;

pub const IMAGE_FILE: &str = "image.npy";
pub const LABEL_FILE: &str = "label.npy";
pub const BRATS_DIMS: [usize; 3] = [240, 240, 155];

/// Noisy ellipsoidal head with, optionally, a tumor of nested label shells:
/// enhancing core 4 inside necrosis 1 inside edema 2.
pub fn synth_volume(patient_id: &str, dims: [usize; 3], tumor: bool, rng: &mut Prng) -> Result<VolumeRecord> {
    let [h, w, s] = dims;
    if h < 8 || w < 8 || s < 1 {
        return Err(invalid!(
            "volume dims {dims:?} too small (need h, w >= 8 and at least one slice)"
        ));
    }
    let (fh, fw, fs) = (h as f64, w as f64, s as f64);
    let head = [fh * 0.5, fw * 0.5, fs * 0.5, fh * 0.42, fw * 0.36, fs * 0.48];
    let r = rng.uniform(0.08, 0.16);
    let t = [
        fh * rng.uniform(0.38, 0.62),
        fw * rng.uniform(0.38, 0.62),
        fs * rng.uniform(0.4, 0.6),
        fh * r,
        fw * r,
        (fs * r * 1.5).max(1.0),
    ];
    let dist = |e: &[f64; 6], y: f64, x: f64, k: f64| {
        ((y - e[0]) / e[3]).powi(2) + ((x - e[1]) / e[4]).powi(2) + ((k - e[2]) / e[5]).powi(2)
    };
    let n = h * w * s;
    let mut image = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            for k in 0..s {
                let (py, px, pk) = (y as f64 + 0.5, x as f64 + 0.5, k as f64 + 0.5);
                let (mut v, mut l) = (0.0, 0u8);
                if dist(&head, py, px, pk) <= 1.0 {
                    v = 400.0 + 30.0 * rng.normal();
                    if tumor {
                        let d = dist(&t, py, px, pk);
                        (v, l) = if d <= 0.16 {
                            (900.0 + 40.0 * rng.normal(), 4)
                        } else if d <= 0.45 {
                            (650.0 + 40.0 * rng.normal(), 1)
                        } else if d <= 1.0 {
                            (550.0 + 40.0 * rng.normal(), 2)
                        } else {
                            (v, 0)
                        };
                    }
                }
                image.push(v.max(0.0) as f32);
                label.push(l);
            }
        }
    }
    VolumeRecord::new(patient_id, dims, image, label)
}

/// Writes `image.npy` (float32) and `label.npy` (uint8) under `dir/<id>`.
pub fn write_volume(dir: &Path, v: &VolumeRecord) -> Result<PathBuf> {
    let pdir = dir.join(&v.patient_id);
    let shape = v.dims.to_vec();
    write_array(
        &pdir.join(IMAGE_FILE),
        &NpyArray::new(shape.clone(), NpyData::F32(v.image.clone()))?,
    )?;
    write_array(
        &pdir.join(LABEL_FILE),
        &NpyArray::new(shape, NpyData::U8(v.label.clone()))?,
    )?;
    Ok(pdir)
}

pub fn read_volume(dir: &Path, patient_id: &str, modality: usize) -> Result<VolumeRecord> {
    let pdir = dir.join(patient_id);
    let image = read_array(&pdir.join(IMAGE_FILE))?;
    let label = read_array(&pdir.join(LABEL_FILE))?;
    VolumeRecord::from_arrays(patient_id, &image, &label, modality)
}

/// Sorted names of the subdirectories of `dir`.
pub fn patient_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDirOptions {
    pub slices: PreprocessOptions,
    pub modality: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for VolumeDirOptions {
    fn default() -> Self {
        VolumeDirOptions {
            slices: PreprocessOptions::default(),
            modality: 0,
            seed: 0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub volumes_found: usize,
    pub volumes_ok: usize,
    pub slices_kept: usize,
    pub slices_dropped: usize,
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_slices: usize,
    pub test_slices: usize,
    /// One line per missing or corrupt volume.
    pub problems: Vec<String>,
}

/// Preprocesses every patient directory under `volume_dir` into a slice
/// dataset at `out`. The split is drawn over all directories found, so a
/// bad volume does not move other patients between splits. Bad volumes
/// are skipped and reported in `problems`.
pub fn preprocess_dir(volume_dir: &Path, out: &Path, opts: &VolumeDirOptions) -> Result<(Manifest, PreprocessSummary)> {
    let ids = patient_dirs(volume_dir)?;
    if ids.is_empty() {
        return Err(invalid!("{} contains no patient directories", volume_dir.display()));
    }
    let (train, _) = split_patients(&ids, opts.train_fraction, opts.seed)?;
    let train: BTreeSet<String> = train.into_iter().collect();
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        seed: opts.seed,
        train_fraction: opts.train_fraction,
        source: "volumes".into(),
        params: serde_json::to_value(opts)?,
        train_patients: 0,
        test_patients: 0,
        train_slices: 0,
        test_slices: 0,
    };
    let mut writer = DatasetWriter::new(out, meta)?;
    let mut problems = Vec::new();
    let (mut ok, mut dropped) = (0, 0);
    for id in &ids {
        let split = if train.contains(id) { Split::Train } else { Split::Test };
        let result = read_volume(volume_dir, id, opts.modality).and_then(|v| {
            let slices = preprocess_volume(&v, &opts.slices)?;
            for rec in &slices {
                writer.add(rec, split)?;
            }
            Ok(v.dims[2] - slices.len())
        });
        match result {
            Ok(d) => {
                ok += 1;
                dropped += d;
            }
            Err(e) => {
                log::warn!("skipping volume {id}: {e}");
                problems.push(format!("{id}: {e}"));
            }
        }
    }
    let manifest = writer.finish()?;
    let m = &manifest.meta;
    let summary = PreprocessSummary {
        volumes_found: ids.len(),
        volumes_ok: ok,
        slices_kept: manifest.records.len(),
        slices_dropped: dropped,
        train_patients: m.train_patients,
        test_patients: m.test_patients,
        train_slices: m.train_slices,
        test_slices: m.test_slices,
        problems,
    };
    Ok((manifest, summary))
}
