//! Brute-force references built from plain loops over the stored weights.
#![allow(dead_code, clippy::needless_range_loop)]

use coe_core::coe::CoELayer;
use coe_core::experts::ExpertFFN;
use coe_core::{GatingMode, ParamStore, ResidualMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// `down · (silu(gate·x) ⊙ up·x)` for one token.
pub fn expert(store: &ParamStore<f64>, e: &ExpertFFN, x: &[f64]) -> Vec<f64> {
    let (g, u, dn) = (store.tensor(e.gate), store.tensor(e.up), store.tensor(e.down));
    let (d, h) = (g.shape()[0], g.shape()[1]);
    let mut mid = vec![0.0; h];
    for (j, m) in mid.iter_mut().enumerate() {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..d {
            a += x[i] * g.data()[i * h + j];
            b += x[i] * u.data()[i * h + j];
        }
        *m = silu(a) * b;
    }
    (0..d).map(|o| (0..h).map(|j| mid[j] * dn.data()[j * d + o]).sum()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Router affinities `softmax(R x)` for one token.
pub fn scores(store: &ParamStore<f64>, embed: coe_core::ParamId, x: &[f64]) -> Vec<f64> {
    let r = store.tensor(embed);
    let (n, d) = (r.shape()[0], r.shape()[1]);
    let logits: Vec<f64> = (0..n).map(|e| (0..d).map(|i| r.data()[e * d + i] * x[i]).sum()).collect();
    softmax(&logits)
}

/// 0/1 mask of the `k` largest entries by repeated arg-max; ties keep the lower index.
pub fn topk_mask(s: &[f64], k: usize) -> Vec<bool> {
    let mut taken = vec![false; s.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..s.len() {
            if !taken[i] && best.is_none_or(|b| s[i] > s[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
    }
    taken
}

/// One routed pass: every expert evaluated densely, then masked by the gates.
fn routed_dense(store: &ParamStore<f64>, experts: &[ExpertFFN], s: &[f64], mask: &[bool], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, e) in experts.iter().enumerate() {
        let y = expert(store, e, x);
        let g = if mask[i] { s[i] } else { 0.0 };
        for (o, v) in out.iter_mut().zip(y) {
            *o += g * v;
        }
    }
    out
}

/// Plain top-k MoE output for every row of `x (tokens×d)`.
pub fn moe(store: &ParamStore<f64>, layer: &CoELayer, router: usize, k: usize, x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|xt| {
            let s = scores(store, layer.routers[router].embed, xt);
            let mut y = routed_dense(store, &layer.experts, &s, &topk_mask(&s, k), xt);
            for sh in &layer.shared {
                for (o, v) in y.iter_mut().zip(expert(store, &sh.0, xt)) {
                    *o += v;
                }
            }
            y
        })
        .collect()
}

/// The iterative layer, token by token, with the per-mode residual wiring.
///
/// Returns the output rows and the selected sets `[token][iteration]`.
pub fn coe(store: &ParamStore<f64>, layer: &CoELayer, x: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<Vec<usize>>>) {
    let cfg = &layer.config;
    let kc = cfg.k / cfg.c;
    let mut out = Vec::with_capacity(x.len());
    let mut sel = Vec::new();
    for x0 in x.chunks(d) {
        let mut prev = x0.to_vec();
        let mut tok_sel = Vec::new();
        let fixed = scores(store, layer.routers[0].embed, x0);
        for t in 0..cfg.c {
            let s = match cfg.gating {
                GatingMode::Shared => fixed.clone(),
                GatingMode::PerIteration => scores(store, layer.routers[t].embed, &prev),
            };
            let mask = topk_mask(&s, kc);
            tok_sel.push((0..mask.len()).filter(|&i| mask[i]).collect());
            let mut next = routed_dense(store, &layer.experts, &s, &mask, &prev);
            for sh in &layer.shared {
                for (o, v) in next.iter_mut().zip(expert(store, &sh.0, &prev)) {
                    *o += v;
                }
            }
            let res: Option<&[f64]> = match cfg.residual {
                ResidualMode::Inner => Some(&prev),
                ResidualMode::Init => Some(x0),
                ResidualMode::Outer | ResidualMode::None => None,
            };
            if let Some(r) = res {
                for (o, v) in next.iter_mut().zip(r) {
                    *o += v;
                }
            }
            prev = next;
        }
        if cfg.residual == ResidualMode::Outer {
            for (o, v) in prev.iter_mut().zip(x0) {
                *o += v;
            }
        }
        out.extend(prev);
        sel.push(tok_sel);
    }
    (out, sel)
}
