//! On-disk slice datasets: `<root>/{train,test}/<patient_id>/slice_<k>.{img,mask}.npy`,
//! a `manifest.jsonl` with one record per slice and `dataset.json` metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::npy::{read_array, write_array, NpyArray, NpyData};
use crate::data::preprocess::SliceRecord;
use crate::data::split::Split;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub slice_index: usize,
    /// Relative to the dataset root.
    pub image_path: String,
    pub mask_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub train_fraction: f64,
    /// `"volumes"` or `"synthetic"`.
    pub source: String,
    pub params: serde_json::Value,
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_slices: usize,
    pub test_slices: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<ManifestRecord>,
}

fn check_id(id: &str) -> Result<()> {
    let ok =
        !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(invalid!(
            "patient id {id:?} must be non-empty and use only [A-Za-z0-9._-]"
        ))
    }
}

/// Patient-level leakage check.
pub fn check_disjoint(records: &[ManifestRecord]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for r in records {
        if let Some(prev) = seen.insert(&r.patient_id, r.split) {
            if prev != r.split {
                return Err(invalid!("patient {} appears in both splits", r.patient_id));
            }
        }
    }
    Ok(())
}

fn image_array(t: &Tensor4<f32>) -> Result<NpyArray> {
    let s = t.shape();
    NpyArray::new(vec![s.c, s.h, s.w], NpyData::F32(t.data().to_vec()))
}

fn mask_array(t: &Tensor4<f32>) -> Result<NpyArray> {
    let s = t.shape();
    NpyArray::new(vec![s.h, s.w], NpyData::U8(t.data().iter().map(|&v| v as u8).collect()))
}

/// Incremental dataset writer. Slices are written as they arrive; the
/// manifest is written by [`DatasetWriter::finish`].
pub struct DatasetWriter {
    root: PathBuf,
    meta: DatasetMeta,
    records: Vec<ManifestRecord>,
}

impl DatasetWriter {
    pub fn new(root: &Path, meta: DatasetMeta) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(DatasetWriter {
            root: root.to_path_buf(),
            meta,
            records: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn add(&mut self, rec: &SliceRecord, split: Split) -> Result<()> {
        check_id(&rec.patient_id)?;
        if rec.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(invalid!(
                "mask of {} slice {} is not binary",
                rec.patient_id,
                rec.slice_index
            ));
        }
        let dir = format!("{}/{}", split.as_str(), rec.patient_id);
        let image_path = format!("{dir}/slice_{}.img.npy", rec.slice_index);
        let mask_path = format!("{dir}/slice_{}.mask.npy", rec.slice_index);
        write_array(&self.root.join(&image_path), &image_array(&rec.image)?)?;
        write_array(&self.root.join(&mask_path), &mask_array(&rec.mask)?)?;
        self.records.push(ManifestRecord {
            patient_id: rec.patient_id.clone(),
            slice_index: rec.slice_index,
            image_path,
            mask_path,
            split,
        });
        Ok(())
    }

    /// Sorts records by patient id then slice index and writes the manifest.
    pub fn finish(self) -> Result<Manifest> {
        let DatasetWriter {
            root,
            mut meta,
            mut records,
        } = self;
        records.sort_by(|a, b| (&a.patient_id, a.slice_index).cmp(&(&b.patient_id, b.slice_index)));
        check_disjoint(&records)?;
        let patients = |s: Split| {
            records
                .iter()
                .filter(|r| r.split == s)
                .map(|r| r.patient_id.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        };
        meta.format_version = FORMAT_VERSION;
        meta.train_patients = patients(Split::Train);
        meta.test_patients = patients(Split::Test);
        meta.train_slices = records.iter().filter(|r| r.split == Split::Train).count();
        meta.test_slices = records.len() - meta.train_slices;
        let manifest = Manifest { root, meta, records };
        manifest.save()?;
        Ok(manifest)
    }
}

/// Writes slices and the manifest. Records are ordered by patient id then
/// slice index.
pub fn write_dataset(root: &Path, slices: &[(SliceRecord, Split)], meta: DatasetMeta) -> Result<Manifest> {
    let mut w = DatasetWriter::new(root, meta)?;
    for (rec, split) in slices {
        w.add(rec, *split)?;
    }
    w.finish()
}

impl Manifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        let meta_path = self.root.join(META_FILE);
        let text = serde_json::to_string_pretty(&self.meta)? + "\n";
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<ManifestRecord>>>()?;
        check_disjoint(&records)?;
        let meta_path = root.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format version {}",
                meta.format_version
            )));
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            meta,
            records,
        })
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_record(&self, r: &ManifestRecord) -> Result<SliceRecord> {
        let img = read_array(&self.root.join(&r.image_path))?;
        let mask = read_array(&self.root.join(&r.mask_path))?;
        let (c, h, w) = match (img.shape.as_slice(), &img.data) {
            ([c, h, w], NpyData::F32(_)) if *c == 3 => (*c, *h, *w),
            _ => {
                return Err(Error::Format(format!(
                    "{}: expected a (3, h, w) float32 image, got {:?} {}",
                    r.image_path,
                    img.shape,
                    img.data.descr()
                )))
            }
        };
        if mask.shape != [h, w] {
            return Err(Error::Format(format!(
                "{}: mask shape {:?} is not ({h}, {w})",
                r.mask_path, mask.shape
            )));
        }
        let m = mask.data.to_f64();
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format(format!("{}: mask is not binary", r.mask_path)));
        }
        let NpyData::F32(pixels) = img.data else { unreachable!() };
        Ok(SliceRecord {
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
            image: Tensor4::from_vec(Shape::new(1, c, h, w)?, pixels)?,
            mask: Tensor4::from_vec(Shape::new(1, 1, h, w)?, m.iter().map(|&v| v as f32).collect())?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SliceRecord>> {
        self.records(split).map(|r| self.load_record(r)).collect()
    }

    /// Checks that every referenced file exists and parses and that no
    /// patient spans both splits. Returns the problems found.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if let Err(e) = check_disjoint(&self.records) {
            problems.push(e.to_string());
        }
        for r in &self.records {
            if let Err(e) = self.load_record(r) {
                problems.push(e.to_string());
            }
        }
        problems
    }
}
