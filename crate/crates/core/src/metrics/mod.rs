//! Parameter, operation and segmentation metrics.

pub mod cost;
pub mod dice;
pub mod eval;
pub mod report;
pub mod series;

pub use cost::{count_params, CostEntry, CostReport, Costed, OpCounter, FLOP_CONVENTION};
pub use dice::{dice_per_sample, dice_score};
pub use eval::{binarize, evaluate, CaseDice, EvalReport, DEFAULT_THRESHOLD};
pub use report::emit_reports;
pub use series::MetricSeries;
