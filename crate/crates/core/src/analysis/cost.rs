use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::{param_count, ModelConfig, ParamCount};
use crate::Result;

/// Elements held per parameter during AdamW training: weights plus two moments.
pub const OPTIMIZER_STATE_MULTIPLIER: u64 = 3;

#[derive(Debug, Clone, Serialize)]
pub struct ConfigCost {
    pub params: ParamCount,
    pub expert_invocations_per_token_per_layer: u64,
    pub expert_invocations_per_token: u64,
    pub routers: u64,
    /// Parameter count times [`OPTIMIZER_STATE_MULTIPLIER`]; an analytic
    /// stand-in for training memory, not a device measurement.
    pub analytic_memory_elements: u64,
}

impl ConfigCost {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.coe;
        let per_layer = (c.c * c.k_per_iter()) as u64;
        let params = param_count(config);
        Ok(Self {
            params,
            expert_invocations_per_token_per_layer: per_layer,
            expert_invocations_per_token: per_layer * config.layers as u64,
            routers: (c.n_routers() * config.layers) as u64,
            analytic_memory_elements: params.total * OPTIMIZER_STATE_MULTIPLIER,
        })
    }

    fn axes(&self) -> [(&'static str, u64); 8] {
        [
            ("total_params", self.params.total),
            ("non_embedding_params", self.params.non_embedding),
            ("routed_expert_params", self.params.routed_experts),
            ("router_params", self.params.routers),
            ("expert_invocations_per_token_per_layer", self.expert_invocations_per_token_per_layer),
            ("expert_invocations_per_token", self.expert_invocations_per_token),
            ("routers", self.routers),
            ("analytic_memory_elements", self.analytic_memory_elements),
        ]
    }
}

/// Which side is cheaper on an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominant {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub label: &'static str,
    pub a: ConfigCost,
    pub b: ConfigCost,
    /// `b / a` per axis.
    pub ratio_b_over_a: BTreeMap<String, f64>,
    /// Symmetric percentage difference `200·(b − a)/(a + b)` per axis.
    pub delta_pct: BTreeMap<String, f64>,
    /// The configuration with the smaller value per axis.
    pub cheaper: BTreeMap<String, Dominant>,
}

pub fn cost_compare(a: &ModelConfig, b: &ModelConfig) -> Result<CostReport> {
    let (ca, cb) = (ConfigCost::of(a)?, ConfigCost::of(b)?);
    let mut ratio = BTreeMap::new();
    let mut delta = BTreeMap::new();
    let mut cheaper = BTreeMap::new();
    for ((name, va), (_, vb)) in ca.axes().into_iter().zip(cb.axes()) {
        let (fa, fb) = (va as f64, vb as f64);
        ratio.insert(
            name.to_string(),
            if va == 0 {
                if vb == 0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                fb / fa
            },
        );
        delta.insert(name.to_string(), if va + vb == 0 { 0.0 } else { 200.0 * (fb - fa) / (fa + fb) });
        cheaper.insert(
            name.to_string(),
            match va.cmp(&vb) {
                std::cmp::Ordering::Less => Dominant::A,
                std::cmp::Ordering::Greater => Dominant::B,
                std::cmp::Ordering::Equal => Dominant::Tie,
            },
        );
    }
    Ok(CostReport {
        label: "analytic",
        a: ca,
        b: cb,
        ratio_b_over_a: ratio,
        delta_pct: delta,
        cheaper,
    })
}
