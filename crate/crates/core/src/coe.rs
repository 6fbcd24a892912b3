//! The Chain-of-Experts layer.
//!
//! With `x⁰ = x`, each of the `C` iterations computes
//!
//! ```text
//! xᵗ = Σ Ê_i(xᵗ⁻¹) + Σ g_{t,i} · E_i(xᵗ⁻¹) + residual
//! ```
//!
//! where the routed gates keep the top `K / C` softmax scores of the
//! iteration's router applied to `xᵗ⁻¹`. The residual term depends on
//! [`ResidualMode`]; [`GatingMode::Shared`] computes gates once from `x⁰` and
//! reuses them at every iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, ParamStore, Tape, Tensor, Var};
use crate::experts::{affinities, apply_experts, select_rows, shared_sum, ExpertFFN, GateVector, Invocations, Router, SharedExpert};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `+ xᵗ⁻¹` at every iteration.
    Inner,
    /// No per-step residual; `y = xᶜ + x`.
    Outer,
    /// `+ x⁰` at every iteration.
    Init,
    /// No residual at all.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// One router per iteration, applied to the evolving hidden state.
    PerIteration,
    /// One router applied to `x⁰`; the selection is reused at every iteration.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoEConfig {
    /// Routed experts `N`.
    pub n_experts: usize,
    /// Shared experts `M`.
    pub n_shared: usize,
    /// Total routed selections per token per layer `K`.
    pub k: usize,
    /// Communication steps `C`.
    pub c: usize,
    pub residual: ResidualMode,
    pub gating: GatingMode,
    /// Expert intermediate size `h`.
    pub intermediate: usize,
    /// Hidden size `d`.
    pub hidden: usize,
    /// Weight of the optional Switch-style load-balance penalty (0 disables it).
    pub load_balance_coef: f64,
}

impl Default for CoEConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            n_shared: 1,
            k: 4,
            c: 2,
            residual: ResidualMode::Inner,
            gating: GatingMode::PerIteration,
            intermediate: 256,
            hidden: 128,
            load_balance_coef: 0.0,
        }
    }
}

impl CoEConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.c == 0 {
            return fail("communication steps C must be >= 1".into());
        }
        if self.n_experts == 0 || self.hidden == 0 || self.intermediate == 0 {
            return fail("expert count, hidden and intermediate sizes must be positive".into());
        }
        if self.k == 0 || !self.k.is_multiple_of(self.c) {
            return fail(format!("K = {} must be a positive multiple of C = {}", self.k, self.c));
        }
        if self.k / self.c > self.n_experts {
            return fail(format!("K / C = {} exceeds N = {}", self.k / self.c, self.n_experts));
        }
        if !(self.load_balance_coef >= 0.0) {
            return fail("load_balance_coef must be >= 0".into());
        }
        Ok(())
    }

    /// Selections per iteration, `K / C`.
    pub fn k_per_iter(&self) -> usize {
        self.k / self.c
    }

    pub fn n_routers(&self) -> usize {
        match self.gating {
            GatingMode::PerIteration => self.c,
            GatingMode::Shared => 1,
        }
    }
}

/// Selected experts and gate values for one layer, indexed `[token][iteration][slot]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub tokens: usize,
    pub iterations: usize,
    pub k_per_iter: usize,
    experts: Vec<usize>,
    gates: Vec<f64>,
}

impl LayerTrace {
    pub fn new(tokens: usize, iterations: usize, k_per_iter: usize) -> Self {
        let len = tokens * iterations * k_per_iter;
        Self {
            tokens,
            iterations,
            k_per_iter,
            experts: vec![0; len],
            gates: vec![0.0; len],
        }
    }

    fn offset(&self, token: usize, iteration: usize) -> usize {
        (token * self.iterations + iteration) * self.k_per_iter
    }

    pub(crate) fn record<T: Element>(&mut self, iteration: usize, gates: &[GateVector<T>]) {
        debug_assert_eq!(gates.len(), self.tokens);
        for (t, g) in gates.iter().enumerate() {
            let off = self.offset(t, iteration);
            for (slot, &e) in g.selected.iter().enumerate() {
                self.experts[off + slot] = e;
                self.gates[off + slot] = g.gates[e].as_f64();
            }
        }
    }

    /// Expert ids chosen for `token` at `iteration` (ascending).
    pub fn selection(&self, token: usize, iteration: usize) -> &[usize] {
        let off = self.offset(token, iteration);
        &self.experts[off..off + self.k_per_iter]
    }

    pub fn gate_values(&self, token: usize, iteration: usize) -> &[f64] {
        let off = self.offset(token, iteration);
        &self.gates[off..off + self.k_per_iter]
    }

    /// `(expert, gate)` pairs for `token` at `iteration`.
    pub fn pairs(&self, token: usize, iteration: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.selection(token, iteration)
            .iter()
            .copied()
            .zip(self.gate_values(token, iteration).iter().copied())
    }

    /// Whether both traces chose the same experts everywhere (gate values may differ).
    pub fn same_selection(&self, other: &LayerTrace) -> bool {
        self.tokens == other.tokens && self.iterations == other.iterations && self.experts == other.experts
    }

    /// Number of `(token, iteration)` entries.
    pub fn entries(&self) -> usize {
        self.tokens * self.iterations
    }

    /// Row-wise concatenation of traces with matching iteration structure.
    pub fn concat(parts: &[LayerTrace]) -> Result<LayerTrace> {
        let Some(first) = parts.first() else {
            return Ok(LayerTrace::new(0, 0, 0));
        };
        let mut out = LayerTrace::new(0, first.iterations, first.k_per_iter);
        for p in parts {
            if p.iterations != first.iterations || p.k_per_iter != first.k_per_iter {
                return Err(Error::Usage("cannot concatenate traces with different routing shapes".into()));
            }
            out.tokens += p.tokens;
            out.experts.extend_from_slice(&p.experts);
            out.gates.extend_from_slice(&p.gates);
        }
        Ok(out)
    }
}

/// One [`LayerTrace`] per model layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
}

impl RoutingTrace {
    pub fn same_selection(&self, other: &RoutingTrace) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_selection(b))
    }
}

/// Parameters of one CoE layer.
#[derive(Debug, Clone)]
pub struct CoELayer {
    pub config: CoEConfig,
    pub experts: Vec<ExpertFFN>,
    pub shared: Vec<SharedExpert>,
    pub routers: Vec<Router>,
}

impl CoELayer {
    /// Registers `prefix.expert.{i}.*`, `prefix.shared.{i}.*` and `prefix.router.{t}.embed`.
    pub fn register<T: Element>(store: &mut ParamStore<T>, prefix: &str, config: &CoEConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.hidden, config.intermediate);
        let experts = (0..config.n_experts)
            .map(|i| ExpertFFN::register(store, &format!("{prefix}.expert.{i}"), d, h, std, rng))
            .collect::<Result<_>>()?;
        let shared = (0..config.n_shared)
            .map(|i| ExpertFFN::register(store, &format!("{prefix}.shared.{i}"), d, h, std, rng).map(SharedExpert))
            .collect::<Result<_>>()?;
        let routers = (0..config.n_routers())
            .map(|t| Router::register(store, &format!("{prefix}.router.{t}"), t, config.n_experts, d, std, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            experts,
            shared,
            routers,
        })
    }
}

#[derive(Debug)]
pub struct CoEOutput {
    pub y: Var,
    pub trace: LayerTrace,
    pub invocations: Invocations,
    /// Present when `load_balance_coef > 0`; already scaled by the coefficient.
    pub aux_loss: Option<Var>,
}

/// Runs the layer according to its configured residual and gating modes.
pub fn coe_forward<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &CoELayer, x: Var) -> Result<CoEOutput> {
    layer.config.validate()?;
    if layer.routers.len() != layer.config.n_routers() || layer.experts.len() != layer.config.n_experts || layer.shared.len() != layer.config.n_shared {
        return Err(Error::Config("layer parameters do not match its configuration".into()));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != layer.config.hidden {
        return Err(Error::Dimension {
            op: "coe_forward",
            lhs: shape,
            rhs: vec![layer.config.hidden],
        });
    }
    iterate(tape, store, layer, x)
}

fn require(layer: &CoELayer, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "layer is configured with {:?}/{:?}, expected {what}",
            layer.config.residual, layer.config.gating
        )))
    }
}

/// Variant with one router whose selection from `x⁰` is reused at every step.
pub fn coe_forward_shared_gating<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &CoELayer, x: Var) -> Result<CoEOutput> {
    require(layer, layer.config.gating == GatingMode::Shared, "shared gating")?;
    coe_forward(tape, store, layer, x)
}

/// Variant without per-step residuals and a single `+ x` after the last step.
pub fn coe_forward_outer_residual<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &CoELayer, x: Var) -> Result<CoEOutput> {
    require(layer, layer.config.residual == ResidualMode::Outer, "outer residual")?;
    coe_forward(tape, store, layer, x)
}

/// Variant adding `x⁰` rather than `xᵗ⁻¹` at every step.
pub fn coe_forward_init_residual<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &CoELayer, x: Var) -> Result<CoEOutput> {
    require(layer, layer.config.residual == ResidualMode::Init, "init residual")?;
    coe_forward(tape, store, layer, x)
}

fn iterate<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, layer: &CoELayer, x0: Var) -> Result<CoEOutput> {
    let cfg = &layer.config;
    let tokens = tape.shape(x0)[0];
    let kc = cfg.k_per_iter();
    let mut trace = LayerTrace::new(tokens, cfg.c, kc);
    let mut invocations = Invocations::new(tokens);
    let mut aux_terms = Vec::new();
    let mut fixed: Option<(Var, Vec<GateVector<T>>)> = None;
    let mut prev = x0;
    for t in 0..cfg.c {
        let (scores, gates) = match (cfg.gating, &fixed) {
            (GatingMode::Shared, Some((s, g))) => (*s, g.clone()),
            (GatingMode::Shared, None) => {
                let s = affinities(tape, store, &layer.routers[0], x0)?;
                let g = select_rows(tape, s, kc)?;
                fixed = Some((s, g.clone()));
                (s, g)
            }
            (GatingMode::PerIteration, _) => {
                let s = affinities(tape, store, &layer.routers[t], prev)?;
                let g = select_rows(tape, s, kc)?;
                (s, g)
            }
        };
        if cfg.load_balance_coef > 0.0 && (cfg.gating == GatingMode::PerIteration || t == 0) {
            aux_terms.push(load_balance(tape, scores, &gates, cfg.n_experts, kc)?);
        }
        let (routed, calls) = apply_experts(tape, store, &layer.experts, scores, &gates, prev)?;
        invocations.merge(&calls);
        trace.record(t, &gates);
        let mut step = match shared_sum(tape, store, &layer.shared, prev)? {
            Some(s) => tape.add(s, routed)?,
            None => routed,
        };
        step = match cfg.residual {
            ResidualMode::Inner => tape.add(step, prev)?,
            ResidualMode::Init => tape.add(step, x0)?,
            ResidualMode::Outer | ResidualMode::None => step,
        };
        prev = step;
    }
    let y = if cfg.residual == ResidualMode::Outer { tape.add(prev, x0)? } else { prev };
    let aux_loss = match aux_terms.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &v in rest {
                acc = tape.add(acc, v)?;
            }
            Some(tape.scale(acc, cfg.load_balance_coef / aux_terms.len() as f64))
        }
    };
    Ok(CoEOutput {
        y,
        trace,
        invocations,
        aux_loss,
    })
}

/// `N · Σ_i f_i · P_i` with `f_i` the (constant) fraction of selections that
/// went to expert `i` and `P_i` its mean affinity.
fn load_balance<T: Element>(tape: &mut Tape<T>, scores: Var, gates: &[GateVector<T>], n: usize, kc: usize) -> Result<Var> {
    let tokens = gates.len();
    let mut frac = vec![0.0; n];
    for g in gates {
        for &e in &g.selected {
            frac[e] += 1.0 / (tokens * kc) as f64;
        }
    }
    let ones = tape.constant(&Tensor::from_f64(vec![1, tokens], &vec![1.0 / tokens as f64; tokens])?);
    let mean_scores = tape.matmul(ones, scores)?;
    let f = tape.constant(&Tensor::from_f64(vec![n, 1], &frac)?);
    let dotp = tape.matmul(mean_scores, f)?;
    Ok(tape.scale(dotp, n as f64))
}
