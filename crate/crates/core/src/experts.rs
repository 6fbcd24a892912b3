//! Expert FFNs, shared experts and softmax/top-k gating.
//!
//! Gating follows the literal sparse-MoE form: scores are a softmax over all
//! `N` router logits, the `k` largest survive as gates with their raw score
//! values (no renormalization), and every other gate is zero. Selection indices
//! are constants for differentiation; gradients flow only through the
//! surviving scores.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::coe::LayerTrace;
use crate::{Error, Result};

/// Gated-linear-unit FFN: `down(silu(x·gate) ⊙ (x·up))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertFFN {
    /// `d×h`
    pub gate: ParamId,
    /// `d×h`
    pub up: ParamId,
    /// `h×d`
    pub down: ParamId,
}

/// An expert applied to every token with unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedExpert(pub ExpertFFN);

/// Router vectors for the `N` routed experts, owned by one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Router {
    /// `N×d`
    pub embed: ParamId,
    pub iteration: usize,
}

/// Normal(0, std) initialization of a fresh tensor.
pub(crate) fn normal_tensor<T: Element>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let numel = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and nonnegative");
    let data = (0..numel).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl ExpertFFN {
    pub fn register<T: Element>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, intermediate: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let gate = store.register(format!("{prefix}.gate"), normal_tensor(vec![hidden, intermediate], std, rng), true)?;
        let up = store.register(format!("{prefix}.up"), normal_tensor(vec![hidden, intermediate], std, rng), true)?;
        let down = store.register(format!("{prefix}.down"), normal_tensor(vec![intermediate, hidden], std, rng), true)?;
        Ok(Self { gate, up, down })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.gate, self.up, self.down]
    }

    /// Applies the expert to every row of `x (m×d)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (wg, wu, wd) = (tape.param(store, self.gate), tape.param(store, self.up), tape.param(store, self.down));
        let a = tape.matmul(x, wg)?;
        let a = tape.silu(a);
        let b = tape.matmul(x, wu)?;
        let hmid = tape.mul(a, b)?;
        tape.matmul(hmid, wd)
    }
}

impl Router {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        iteration: usize,
        experts: usize,
        hidden: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.register(format!("{prefix}.embed"), normal_tensor(vec![experts, hidden], std, rng), true)?;
        Ok(Self { embed, iteration })
    }
}

/// Sparse gates for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<T> {
    /// One weight per routed expert; nonzero exactly at `selected`.
    pub gates: Vec<T>,
    /// Chosen expert ids in ascending order.
    pub selected: Vec<usize>,
}

impl<T: Element> GateVector<T> {
    pub fn nonzero(&self) -> usize {
        self.gates.iter().filter(|g| **g != T::zero()).count()
    }
}

/// Softmax router affinities `softmax(e_i · x)` for each row of `x (tokens×d)`.
pub fn affinities<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, router: &Router, x: Var) -> Result<Var> {
    let embed = tape.param(store, router.embed);
    let logits = tape.matmul_nt(x, embed)?;
    tape.softmax_rows(logits)
}

/// Keeps the `k` largest scores. Ties go to the lower expert index.
pub fn select_topk<T: Element>(scores: &[T], k: usize) -> Result<GateVector<T>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let mut gates = vec![T::zero(); n];
    for &i in &selected {
        gates[i] = scores[i];
    }
    Ok(GateVector { gates, selected })
}

/// Row-wise [`select_topk`] over a `tokens×N` score node.
pub fn select_rows<T: Element>(tape: &Tape<T>, scores: Var, k: usize) -> Result<Vec<GateVector<T>>> {
    let n = *tape.shape(scores).last().expect("rank >= 1");
    tape.value(scores).chunks_exact(n).map(|row| select_topk(row, k)).collect()
}

/// Expert evaluations performed by one call, counted per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocations {
    pub per_token: Vec<usize>,
}

impl Invocations {
    pub fn new(tokens: usize) -> Self {
        Self { per_token: vec![0; tokens] }
    }

    pub fn total(&self) -> usize {
        self.per_token.iter().sum()
    }

    pub fn merge(&mut self, other: &Invocations) {
        for (a, b) in self.per_token.iter_mut().zip(&other.per_token) {
            *a += b;
        }
    }
}

/// `Σ g_i · E_i(x)` over the selected experts only.
///
/// `scores` is the `tokens×N` affinity node the gates were selected from; the
/// surviving gate values are read from it so they stay differentiable.
pub fn apply_experts<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    experts: &[ExpertFFN],
    scores: Var,
    gates: &[GateVector<T>],
    x: Var,
) -> Result<(Var, Invocations)> {
    let n = experts.len();
    let xshape = tape.shape(x).to_vec();
    if xshape.len() != 2 || xshape[0] != gates.len() || tape.shape(scores) != [gates.len(), n] {
        return Err(Error::Dimension {
            op: "apply_experts",
            lhs: xshape,
            rhs: tape.shape(scores).to_vec(),
        });
    }
    if let Some(g) = gates.iter().find(|g| g.gates.len() != n) {
        return Err(Error::Dimension {
            op: "apply_experts",
            lhs: vec![g.gates.len()],
            rhs: vec![n],
        });
    }
    let (tokens, d) = (xshape[0], xshape[1]);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, g) in gates.iter().enumerate() {
        for &e in &g.selected {
            rows[e].push(t);
        }
    }
    let mut calls = Invocations::new(tokens);
    let mut parts = Vec::new();
    for (e, (expert, idx)) in experts.iter().zip(rows).enumerate() {
        if idx.is_empty() {
            continue;
        }
        let xs = tape.gather_rows(x, &idx)?;
        let out = expert.forward(tape, store, xs)?;
        let flat: Vec<usize> = idx.iter().map(|&t| t * n + e).collect();
        let g = tape.gather_elems(scores, &flat)?;
        let weighted = tape.scale_rows(out, g)?;
        for &t in &idx {
            calls.per_token[t] += 1;
        }
        parts.push((weighted, idx));
    }
    Ok((tape.scatter_rows(tokens, d, parts)?, calls))
}

/// `Σ Ê_i(x)`, or `None` when there are no shared experts.
pub(crate) fn shared_sum<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, shared: &[SharedExpert], x: Var) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for s in shared {
        let y = s.0.forward(tape, store, x)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc)
}

/// `Σ Ê_i(x)`; an all-zero matrix when `shared` is empty.
pub fn apply_shared<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, shared: &[SharedExpert], x: Var) -> Result<Var> {
    match shared_sum(tape, store, shared, x)? {
        Some(v) => Ok(v),
        None => {
            let zeros = Tensor::zeros(tape.shape(x).to_vec());
            Ok(tape.constant(&zeros))
        }
    }
}

/// Single-pass MoE layer: `Σ Ê_i(x) + Σ g_i · E_i(x)` with top-`k` gating.
pub fn moe_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    experts: &[ExpertFFN],
    shared: &[SharedExpert],
    router: &Router,
    k: usize,
    x: Var,
) -> Result<(Var, LayerTrace, Invocations)> {
    let scores = affinities(tape, store, router, x)?;
    let gates = select_rows(tape, scores, k)?;
    let (routed, calls) = apply_experts(tape, store, experts, scores, &gates, x)?;
    let y = match shared_sum(tape, store, shared, x)? {
        Some(s) => tape.add(s, routed)?,
        None => routed,
    };
    let mut trace = LayerTrace::new(gates.len(), 1, k);
    trace.record(0, &gates);
    Ok((y, trace, calls))
}
