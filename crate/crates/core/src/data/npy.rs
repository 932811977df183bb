//! NPY version 1.0 single-array files.
//!
//! Layout: magic `\x93NUMPY`, version bytes `1 0`, little-endian `u16`
//! header length, an ASCII dict
//! `{'descr': '<f4', 'fortran_order': False, 'shape': (3, 64, 64), }` padded
//! with spaces and a final newline so the data starts on a 64-byte
//! boundary, then the raw little-endian C-order payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
pub const MAX_RANK: usize = 4;
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl NpyData {
    pub fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
            NpyData::U8(_) => "|u1",
            NpyData::I16(_) => "<i2",
            NpyData::I32(_) => "<i4",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::U8(v) => v.len(),
            NpyData::I16(v) => v.len(),
            NpyData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::U8(v) => out.extend_from_slice(v),
            NpyData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(NpyArray { shape, data })
    }

    pub fn header(&self) -> Vec<u8> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let shape = match dims.len() {
            1 => format!("({},)", dims[0]),
            _ => format!("({})", dims.join(", ")),
        };
        let mut dict = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
            self.data.descr()
        );
        let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
        dict.push_str(&" ".repeat(unpadded.next_multiple_of(ALIGN) - unpadded));
        dict.push('\n');
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + dict.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header();
        self.data.write_payload(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(format_err("not an NPY file (bad magic)"));
        }
        if bytes[6] != 1 {
            return Err(format_err(format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
        }
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| format_err("truncated NPY header"))?;
        let header = std::str::from_utf8(header).map_err(|_| format_err("NPY header is not ASCII"))?;
        let (descr, fortran, shape) = parse_header(header)?;
        if fortran {
            return Err(format_err("Fortran-order arrays are not supported"));
        }
        if shape.len() > MAX_RANK {
            return Err(format_err(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("NPY shape overflows"))?;
        let payload = &bytes[10 + hlen..];
        let width = match descr.as_str() {
            "<f4" => 4,
            "<f8" => 8,
            "|u1" | "<u1" => 1,
            "<i2" => 2,
            "<i4" => 4,
            other => return Err(format_err(format!("unsupported dtype {other}"))),
        };
        if payload.len() != n * width {
            return Err(format_err(format!(
                "payload has {} bytes, shape {shape:?} of {descr} needs {}",
                payload.len(),
                n * width
            )));
        }
        let chunks = payload.chunks_exact(width);
        let data = match width {
            1 => NpyData::U8(payload.to_vec()),
            2 => NpyData::I16(chunks.map(|c| i16::from_le_bytes([c[0], c[1]])).collect()),
            8 => NpyData::F64(chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ if descr == "<f4" => NpyData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => NpyData::I32(chunks.map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(NpyArray { shape, data })
    }
}

fn parse_header(h: &str) -> Result<(String, bool, Vec<usize>)> {
    let field = |key: &str| -> Result<&str> {
        let pat = format!("'{key}':");
        let start = h
            .find(&pat)
            .ok_or_else(|| format_err(format!("NPY header lacks {key}")))?
            + pat.len();
        Ok(h[start..].trim_start())
    };
    let d = field("descr")?;
    let descr = d
        .strip_prefix('\'')
        .and_then(|r| r.split('\'').next())
        .ok_or_else(|| format_err("malformed descr"))?
        .to_string();
    let f = field("fortran_order")?;
    let fortran = if f.starts_with("True") {
        true
    } else if f.starts_with("False") {
        false
    } else {
        return Err(format_err("malformed fortran_order"));
    };
    let s = field("shape")?;
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| format_err("malformed shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| format_err(format!("bad dimension {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((descr, fortran, shape))
}

pub fn write_array(path: &Path, a: &NpyArray) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, a.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NpyArray::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
