use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use super::{Batch, Model};
use crate::autodiff::{relative_error, ParamId, Tape};
use crate::coe::RoutingTrace;
use crate::rng::SeedTree;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    /// Largest relative error per model component.
    pub per_component: BTreeMap<String, f64>,
    pub coordinates: Vec<CoordinateCheck>,
    /// Sampled coordinates discarded because a `±h` probe changed some
    /// top-k selection, i.e. the loss is not differentiable within the probe.
    pub routing_flips: usize,
}

/// Central-difference check of the full training objective at randomly
/// sampled parameter coordinates.
///
/// Parameters are chosen uniformly, then a coordinate uniformly within the
/// parameter, so small tensors (norms, routers) are represented. Every probe
/// restores the original value bit-for-bit.
pub fn check_gradients(model: &mut Model<f64>, batch: &Batch, samples: usize, h: f64, seed: u64, fault: bool) -> Result<ModelGradReport> {
    if samples == 0 {
        return Err(Error::Usage("gradient check needs at least one sample".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Usage(format!("finite difference step must be positive, got {h}")));
    }
    model.params.zero_grads();
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let (loss, _, out) = model.loss(&mut tape, batch)?;
    tape.backward(loss, &mut model.params)?;
    let baseline = out.trace;
    drop(tape);

    let candidates: Vec<ParamId> = model.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut rng = SeedTree::new(seed).stream("gradcheck", 0);
    let mut report = ModelGradReport {
        max_rel_error: 0.0,
        per_component: BTreeMap::new(),
        coordinates: Vec::with_capacity(samples),
        routing_flips: 0,
    };
    let max_attempts = samples * 20;
    let mut attempts = 0;
    while report.coordinates.len() < samples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Numeric(format!(
                "only {} of {samples} coordinates had stable routing under ±{h}",
                report.coordinates.len()
            )));
        }
        let id = candidates[rng.random_range(0..candidates.len())];
        let index = rng.random_range(0..model.params.tensor(id).numel());
        let analytic = model.params.tensor(id).grad().map_or(0.0, |g| g[index]);
        let orig = model.params.tensor(id).data()[index];
        let mut probe = |value: f64| -> Result<(f64, RoutingTrace)> {
            model.params.tensor_mut(id).data_mut()[index] = value;
            let mut tape = Tape::new();
            let (loss, _, out) = model.loss(&mut tape, batch)?;
            Ok((tape.item(loss), out.trace))
        };
        let plus = probe(orig + h);
        let minus = probe(orig - h);
        model.params.tensor_mut(id).data_mut()[index] = orig;
        let ((fp, tp), (fm, tm)) = (plus?, minus?);
        if !tp.same_selection(&baseline) || !tm.same_selection(&baseline) {
            report.routing_flips += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel_error = relative_error(analytic, numeric);
        let name = model.params.get(id).name.clone();
        let comp = report.per_component.entry(Model::<f64>::component(&name).to_string()).or_insert(0.0);
        *comp = comp.max(rel_error);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.coordinates.push(CoordinateCheck {
            param: name,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}
