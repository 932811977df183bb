//! Binary checkpoints.
//!
//! Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
//! then the raw little-endian payload. The header holds the model config,
//! optimizer settings, free-form metadata, a directory of tensors (name,
//! kind, shape, byte offset) and the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, Param, Visitor};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::Prng;
use crate::tensor::{DType, Scalar, Shape, Tensor4};

pub const MAGIC: &[u8; 8] = b"EMCADCK\x01";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: [usize; 4],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: DType,
    pub model: ModelConfig,
    pub optimizer: Option<OptimizerHeader>,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

impl CheckpointHeader {
    /// Trainable scalars according to the tensor directory.
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: Model<T>,
    pub optimizer: Option<AdamWState<T>>,
}

struct Gather<'a, T>(&'a mut Vec<(String, TensorKind, Tensor4<T>)>);

impl<T: Scalar> Visitor<T> for Gather<'_, T> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        self.0.push((name.to_string(), TensorKind::Param, p.value.clone()));
    }
    fn buffer(&mut self, name: &str, value: &mut Tensor4<T>) {
        self.0.push((name.to_string(), TensorKind::Buffer, value.clone()));
    }
}

struct Scatter<'a, T> {
    found: &'a mut BTreeMap<(String, u8), Tensor4<T>>,
    missing: Vec<String>,
}

impl<T: Scalar> Scatter<'_, T> {
    fn take(&mut self, name: &str, kind: u8, into: &mut Tensor4<T>) {
        match self.found.remove(&(name.to_string(), kind)) {
            Some(t) if t.shape() == into.shape() => *into = t,
            Some(t) => self
                .missing
                .push(format!("{name} (stored {}, model {})", t.shape(), into.shape())),
            None => self.missing.push(name.to_string()),
        }
    }
}

impl<T: Scalar> Visitor<T> for Scatter<'_, T> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        self.take(name, 0, &mut p.value);
    }
    fn buffer(&mut self, name: &str, value: &mut Tensor4<T>) {
        self.take(name, 1, value);
    }
}

fn kind_tag(k: TensorKind) -> u8 {
    match k {
        TensorKind::Param => 0,
        TensorKind::Buffer => 1,
        TensorKind::AdamM => 2,
        TensorKind::AdamV => 3,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes model tensors, optimizer moments and `meta`. The output is a
/// pure function of its inputs.
pub fn to_bytes<T: Scalar>(
    model: &mut Model<T>,
    optimizer: Option<&AdamWState<T>>,
    meta: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    model.visit("", &mut Gather(&mut tensors));
    if let Some(o) = optimizer {
        for (kind, list) in [(TensorKind::AdamM, &o.m), (TensorKind::AdamV, &o.v)] {
            for (name, t) in o.names.iter().zip(list) {
                tensors.push((name.clone(), kind, t.clone()));
            }
        }
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, kind, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            kind: *kind,
            shape: t.shape().dims(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        model: model.cfg.clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.cfg.clone(),
            step: o.step,
        }),
        meta,
        tensors: entries,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("checkpoint: {msg}"))
}

/// Parses and verifies a checkpoint, rebuilding the model from the embedded
/// config.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if hlen > MAX_HEADER || 16 + hlen > bytes.len() as u64 {
        return Err(corrupt("header length out of range"));
    }
    let hend = 16 + hlen as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!(
            "stored as {:?}, requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[hend..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let size = T::DTYPE.size();
    let mut found = BTreeMap::new();
    for e in &header.tensors {
        let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]).map_err(corrupt)?;
        let start = e.offset as usize;
        let end = start
            .checked_add(shape.len() * size)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| corrupt(format!("tensor {} runs past the payload", e.name)))?;
        let data = payload[start..end].chunks_exact(size).map(T::read_le).collect();
        if found
            .insert((e.name.clone(), kind_tag(e.kind)), Tensor4::from_vec(shape, data)?)
            .is_some()
        {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
    }

    let mut model = Model::new(&header.model, &mut Prng::new(0)).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut scatter = Scatter {
        found: &mut found,
        missing: Vec::new(),
    };
    model.visit("", &mut scatter);
    if !scatter.missing.is_empty() {
        return Err(corrupt(format!(
            "missing or mis-shaped tensors: {}",
            scatter.missing.join(", ")
        )));
    }

    let optimizer = match &header.optimizer {
        None => None,
        Some(h) => {
            let mut state = AdamWState::new(h.config.clone()).map_err(corrupt)?;
            state.step = h.step;
            let mut names = Vec::new();
            crate::nn::for_each_param(&mut model, |name, _| names.push(name.to_string()));
            let has_moments = found.keys().any(|k| k.1 == 2);
            if has_moments {
                for name in &names {
                    let m = found.remove(&(name.clone(), 2));
                    let v = found.remove(&(name.clone(), 3));
                    match (m, v) {
                        (Some(m), Some(v)) => {
                            state.m.push(m);
                            state.v.push(v);
                        }
                        _ => return Err(corrupt(format!("optimizer moments for {name} missing"))),
                    }
                }
                state.names = names;
            }
            Some(state)
        }
    };
    if let Some((name, _)) = found.keys().next() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save<T: Scalar>(
    path: &Path,
    model: &mut Model<T>,
    optimizer: Option<&AdamWState<T>>,
    meta: serde_json::Value,
) -> Result<()> {
    let bytes = to_bytes(model, optimizer, meta)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_count, zero_grads};
    use crate::tensor::shape;

    fn trained() -> (Model<f32>, AdamWState<f32>) {
        let mut rng = Prng::new(3);
        let mut m = Model::<f32>::new(&ModelConfig::tiny([8, 16, 24, 32]), &mut rng).unwrap();
        let x = Tensor4::randn(shape(2, 3, 64, 64), &mut rng, 1.0).unwrap();
        let out = m.forward(&x).unwrap();
        let g = out.p.clone().map(|p| Tensor4::full(p.shape(), 0.01));
        zero_grads(&mut m);
        m.backward(&g).unwrap();
        let mut opt = AdamWState::new(AdamWConfig::default()).unwrap();
        opt.step(&mut m).unwrap();
        (m, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut m, opt) = trained();
        let meta = serde_json::json!({"epoch": 3});
        let bytes = to_bytes(&mut m, Some(&opt), meta.clone()).unwrap();
        let mut ck = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(ck.header.meta, meta);
        assert_eq!(ck.optimizer.as_ref().unwrap(), &opt);
        assert_eq!(to_bytes(&mut ck.model, ck.optimizer.as_ref(), meta).unwrap(), bytes);
    }

    #[test]
    fn directory_counts_match_visitor() {
        let (mut m, _) = trained();
        let ck = from_bytes::<f32>(&to_bytes(&mut m, None, serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(ck.header.param_count(), param_count(&mut m));
        assert!(ck.optimizer.is_none());
    }

    #[test]
    fn corruption_detected() {
        let (mut m, opt) = trained();
        let bytes = to_bytes(&mut m, Some(&opt), serde_json::Value::Null).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(from_bytes::<f32>(&flipped), Err(Error::Format(_))));
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes::<f32>(b"not a checkpoint").is_err());
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, opt) = trained();
        let path = dir.path().join("last.ckpt");
        save(&path, &mut m, Some(&opt), serde_json::Value::Null).unwrap();
        let ck = load::<f32>(&path).unwrap();
        assert_eq!(ck.optimizer.unwrap().step, 1);
        assert!(load::<f32>(&dir.path().join("nope.ckpt")).is_err());
    }
}
