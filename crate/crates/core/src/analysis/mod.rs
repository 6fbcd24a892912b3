//! Routing analyses: expert co-activation across iterations, exact counts of
//! reachable expert combinations, and analytic cost comparisons.

mod coactivation;
mod combinatorics;
mod cost;

pub use coactivation::{accumulate_coactivation, export_heatmap, read_heatmap, CoActivation, CoActivationMatrix};
pub use combinatorics::{binomial, combination_ratio, CombinatoricsReport};
pub use cost::{cost_compare, ConfigCost, CostReport, Dominant, OPTIMIZER_STATE_MULTIPLIER};
