use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Training curves: loss per iteration, mean loss per epoch, and test Dice
/// per epoch with its running maximum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_iteration_loss: Vec<(u64, f64)>,
    pub per_epoch_loss: Vec<(usize, f64)>,
    pub test_mean_dice: Vec<(usize, f64)>,
    pub test_best_dice: Vec<(usize, f64)>,
}

impl MetricSeries {
    pub fn push_iteration(&mut self, iteration: u64, loss: f64) {
        self.per_iteration_loss.push((iteration, loss));
    }

    /// Returns true when `mean_dice` improves on every earlier epoch.
    pub fn push_epoch(&mut self, epoch: usize, mean_loss: f64, mean_dice: f64) -> Result<bool> {
        if let Some(&(last, _)) = self.per_epoch_loss.last() {
            if epoch <= last {
                return Err(invalid!("epoch {epoch} recorded after epoch {last}"));
            }
        }
        let prev = self.best_dice();
        let improved = prev.is_none_or(|b| mean_dice > b);
        let best = prev.map_or(mean_dice, |b| b.max(mean_dice));
        self.per_epoch_loss.push((epoch, mean_loss));
        self.test_mean_dice.push((epoch, mean_dice));
        self.test_best_dice.push((epoch, best));
        Ok(improved)
    }

    pub fn best_dice(&self) -> Option<f64> {
        self.test_best_dice.last().map(|x| x.1)
    }

    pub fn epochs(&self) -> usize {
        self.per_epoch_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_iteration_loss.is_empty() && self.per_epoch_loss.is_empty()
    }
}
