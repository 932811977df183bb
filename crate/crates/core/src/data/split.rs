use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Prng;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Patient-level split: ids are sorted, shuffled with `seed`, and the first
/// `floor(fraction * n)` go to training. Both halves are returned sorted.
pub fn split_patients(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(invalid!("cannot split an empty patient list"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid!("train fraction must lie in (0, 1), got {fraction}"));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(invalid!("patient ids must be unique"));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    Prng::new(seed).shuffle(&mut order);
    let n_train = (fraction * ids.len() as f64 + 1e-9).floor() as usize;
    let mut test = order.split_off(n_train);
    order.sort();
    test.sort();
    Ok((order, test))
}
