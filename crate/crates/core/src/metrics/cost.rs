//! Parameter and operation accounting.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{for_each_param, ConvParams, Module};
use crate::tensor::{Scalar, Shape};

/// Stated in every report.
pub const FLOP_CONVENTION: &str = "FLOPs = 2 x MACs for convolutions (MACs = output pixels x c_out x \
(c_in/groups) x k^2, bias adds not counted); batch norm = 2 ops/element; activations, elementwise \
add/multiply and pooling = 1 op/element; upsampling = 0. Batch size 1.";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    /// Input resolution the operation counts refer to, when counted.
    pub resolution: Option<(usize, usize)>,
    pub convention: String,
}

impl CostReport {
    pub fn from_entries(entries: Vec<CostEntry>, resolution: Option<(usize, usize)>) -> Self {
        CostReport {
            total_params: entries.iter().map(|e| e.params).sum(),
            total_macs: entries.iter().map(|e| e.macs).sum(),
            total_flops: entries.iter().map(|e| e.flops).sum(),
            entries,
            resolution,
            convention: FLOP_CONVENTION.to_string(),
        }
    }

    /// Sums of the entries whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> CostEntry {
        let mut acc = CostEntry {
            name: prefix.to_string(),
            ..Default::default()
        };
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            acc.params += e.params;
            acc.macs += e.macs;
            acc.flops += e.flops;
        }
        acc
    }
}

/// Running operation tally for one block.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpCounter {
    pub macs: u64,
    pub flops: u64,
}

impl OpCounter {
    pub fn conv<T: Scalar>(&mut self, p: &ConvParams<T>, input: Shape) -> Result<Shape> {
        let macs = p.macs(input)?;
        self.macs += macs;
        self.flops += 2 * macs;
        p.output_shape(input)
    }

    pub fn batchnorm(&mut self, s: Shape) {
        self.flops += 2 * s.len() as u64;
    }

    /// Activations, elementwise arithmetic and pooling.
    pub fn pointwise(&mut self, s: Shape) {
        self.flops += s.len() as u64;
    }
}

/// Blocks that can report their operation counts for a given input shape.
pub trait Costed {
    /// Adds entries under `prefix` and returns the output shape.
    fn cost(&self, prefix: &str, input: Shape, out: &mut Vec<CostEntry>) -> Result<Shape>;
}

/// Per-block parameter counts: parameters are grouped by the first
/// `depth` components of their dotted names.
pub fn count_params<T: Scalar>(m: &mut (impl Module<T> + ?Sized), depth: usize) -> CostReport {
    let mut entries: Vec<CostEntry> = Vec::new();
    for_each_param(m, |name, p| {
        let key: Vec<&str> = name.split('.').collect();
        let key = key[..depth.min(key.len().saturating_sub(1)).max(1)].join(".");
        match entries.last_mut() {
            Some(e) if e.name == key => e.params += p.value.len() as u64,
            _ => entries.push(CostEntry {
                name: key,
                params: p.value.len() as u64,
                ..Default::default()
            }),
        }
    });
    CostReport::from_entries(entries, None)
}

/// Fills in `params` for cost entries: each parameter is charged to the
/// entry whose name is the longest dotted prefix of the parameter's name.
/// Parameters without such an entry get an entry of their own owner.
pub fn attach_params<T: Scalar>(report: &mut CostReport, m: &mut (impl Module<T> + ?Sized)) {
    let mut entries = std::mem::take(&mut report.entries);
    for e in &mut entries {
        e.params = 0;
    }
    for_each_param(m, |name, p| {
        let n = p.value.len() as u64;
        let best = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| name.starts_with(&format!("{}.", e.name)))
            .max_by_key(|(_, e)| e.name.len())
            .map(|(i, _)| i);
        match best {
            Some(i) => entries[i].params += n,
            None => {
                let owner = name.rsplit_once('.').map_or(name, |(o, _)| o).to_string();
                match entries.iter_mut().find(|e| e.name == owner) {
                    Some(e) => e.params += n,
                    None => entries.push(CostEntry {
                        name: owner,
                        params: n,
                        ..Default::default()
                    }),
                }
            }
        }
    });
    *report = CostReport::from_entries(entries, report.resolution);
}
