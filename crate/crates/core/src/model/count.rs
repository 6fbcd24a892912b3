use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Analytic parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub routed_experts: u64,
    pub shared_experts: u64,
    pub routers: u64,
    pub attention: u64,
    pub norms: u64,
    /// Input embedding table `V×d`.
    pub embedding: u64,
    /// Output projection `d×V`.
    pub head: u64,
    /// Everything except `embedding` and `head`.
    pub non_embedding: u64,
    pub total: u64,
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let c = &config.coe;
    let (l, d, h, v) = (config.layers as u64, config.hidden as u64, c.intermediate as u64, config.vocab as u64);
    let per_expert = 3 * d * h;
    let routed_experts = c.n_experts as u64 * l * per_expert;
    let shared_experts = c.n_shared as u64 * l * per_expert;
    let routers = c.n_routers() as u64 * l * c.n_experts as u64 * d;
    let attention = 4 * l * d * d;
    let norms = 2 * l * d + d;
    let embedding = v * d;
    let head = d * v;
    let non_embedding = routed_experts + shared_experts + routers + attention + norms;
    ParamCount {
        routed_experts,
        shared_experts,
        routers,
        attention,
        norms,
        embedding,
        head,
        non_embedding,
        total: non_embedding + embedding + head,
    }
}
