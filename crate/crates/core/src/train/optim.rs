use crate::autodiff::{Element, ParamStore};
use crate::{Error, Result};

use super::TrainConfig;

/// AdamW moments, one buffer per parameter in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .all(|(id, p)| self.m[id.index()].len() == p.tensor.numel() && self.v[id.index()].len() == p.tensor.numel())
    }
}

/// One decoupled-weight-decay Adam update of every trainable parameter.
///
/// Gradients are scanned before anything is written, so a non-finite value
/// leaves both parameters and moments untouched.
pub fn adamw_step<T: Element>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, rate: f64, config: &TrainConfig) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Usage("optimizer state does not match the parameter shapes".into()));
    }
    if !(rate >= 0.0) {
        return Err(Error::Usage(format!("learning rate must be nonnegative, got {rate}")));
    }
    for (_, p) in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {} in `{}` at element {i}", g[i], p.name)));
            }
        }
    }
    state.step += 1;
    let [b1, b2] = config.betas;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(config.eps));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let step_size = T::of(rate / c1);
    let inv_c2 = T::of(1.0 / c2);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let decay = T::of(if p.decay { rate * config.weight_decay } else { 0.0 });
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let (data, grad) = p.tensor.data_and_grad();
        let Some(grad) = grad else { continue };
        for (((w, &g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            let denom = (*v * inv_c2).sqrt() + eps;
            *w = *w - step_size * *m / denom - decay * *w;
        }
    }
    Ok(())
}

/// Global L2 norm of all trainable gradients, accumulated in 64-bit.
pub fn global_grad_norm<T: Element>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`; returns
/// the factor applied (1.0 when no clipping was needed).
pub fn clip_global_norm<T: Element>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::of(scale);
    for p in params.iter_mut().filter(|p| p.trainable) {
        if let Some(g) = p.tensor.grad_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    scale
}
