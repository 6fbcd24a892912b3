use std::path::PathBuf;

use crate::autodiff::{Element, Tape};
use crate::coe::{LayerTrace, RoutingTrace};
use crate::experts::Invocations;
use crate::model::Model;
use crate::{Error, Result};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::metrics::{MetricRecord, MetricsWriter, Split};
use super::optim::{adamw_step, clip_global_norm, global_grad_norm, OptimizerState};
use super::{lr_at, DataConfig, DataStream, TrainConfig};

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Updates applied so far.
    pub step: u64,
    pub tokens_seen: u64,
}

impl<T: Element> TrainState<T> {
    pub fn fresh(model: Model<T>) -> Self {
        let optimizer = OptimizerState::new(&model.params);
        Self {
            model,
            optimizer,
            step: 0,
            tokens_seen: 0,
        }
    }
}

/// Where a run writes and when it stops early.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub out_dir: PathBuf,
    /// Stop after this update, leaving `last.ckpt` for a later resume.
    pub halt_at: Option<u64>,
    /// Test hook: poison the loss at this update.
    #[doc(hidden)]
    pub nan_at: Option<u64>,
}

impl RunPaths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            ..Self::default()
        }
    }

    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.out_dir.join("last.ckpt")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join("final.ckpt")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub step: u64,
    pub halted: bool,
    /// Training loss of the first update run by this call.
    pub first_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Held-out loss with the routing it produced.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean cross-entropy per scored token.
    pub loss: f64,
    pub tokens: usize,
    pub trace: RoutingTrace,
    /// Per-layer expert invocation counts, one entry per evaluated token.
    pub invocations: Vec<Invocations>,
}

pub fn evaluate<T: Element>(model: &Model<T>, data: &DataStream, config: &TrainConfig) -> Result<EvalReport> {
    let layers = model.config.layers;
    let mut parts: Vec<Vec<LayerTrace>> = vec![Vec::new(); layers];
    let mut invocations: Vec<Invocations> = (0..layers).map(|_| Invocations::new(0)).collect();
    let (mut sum, mut tokens) = (0.0f64, 0usize);
    for batch in data.val_batches(config.eval_sequences) {
        let mut tape = Tape::new();
        let (_, ce, out) = model.loss(&mut tape, &batch)?;
        let n = batch.scored_tokens();
        sum += tape.item(ce).as_f64() * n as f64;
        tokens += n;
        for (l, lt) in out.trace.layers.into_iter().enumerate() {
            parts[l].push(lt);
        }
        for (acc, inv) in invocations.iter_mut().zip(out.invocations) {
            acc.per_token.extend(inv.per_token);
        }
    }
    if tokens == 0 {
        return Err(Error::Config("validation split yields no sequences".into()));
    }
    let layers = parts.iter().map(|p| LayerTrace::concat(p)).collect::<Result<_>>()?;
    Ok(EvalReport {
        loss: sum / tokens as f64,
        tokens,
        trace: RoutingTrace { layers },
        invocations,
    })
}

/// Runs updates `state.step + 1 ..= total_steps`.
///
/// Appends to `metrics.jsonl` (after trimming records past `state.step` when
/// resuming), refreshes `last.ckpt` every `checkpoint_interval` updates and
/// writes `final.ckpt` at the end. A non-finite loss or gradient stops the run
/// with [`Error::Numeric`] after saving the last good state to `last.ckpt`.
pub fn train<T: Element>(
    state: &mut TrainState<T>,
    data: &DataStream,
    config: &TrainConfig,
    data_config: &DataConfig,
    paths: &RunPaths,
) -> Result<TrainOutcome> {
    config.validate()?;
    if T::DTYPE != config.precision {
        return Err(Error::Config(format!(
            "precision is {} but the model holds {}",
            config.precision.as_str(),
            T::DTYPE.as_str()
        )));
    }
    if state.step > config.total_steps {
        return Err(Error::Config(format!(
            "state is at step {} past total_steps {}",
            state.step, config.total_steps
        )));
    }
    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let keep = (state.step > 0).then_some(state.step);
    let mut metrics = MetricsWriter::open(&paths.metrics(), keep)?;
    let save = |state: &TrainState<T>, path: PathBuf| -> Result<PathBuf> {
        save_checkpoint(&Checkpoint::capture(state, config, data_config), &path)?;
        Ok(path)
    };
    let abort = |state: &TrainState<T>, msg: String| -> Error {
        match save(state, paths.last_checkpoint()) {
            Ok(p) => Error::Numeric(format!("{msg}; last good state (step {}) kept in {}", state.step, p.display())),
            Err(e) => Error::Numeric(format!("{msg}; saving the last good state failed: {e}")),
        }
    };

    let mut outcome = TrainOutcome {
        step: state.step,
        halted: false,
        first_train_loss: None,
        final_train_loss: None,
        final_val_loss: None,
        checkpoint: paths.final_checkpoint(),
    };
    for step in state.step + 1..=config.total_steps {
        let batch = data.train_batch(step);
        let mut tape = Tape::new();
        let (objective, ce, _) = state.model.loss(&mut tape, &batch)?;
        let mut loss = tape.item(ce).as_f64();
        if paths.nan_at == Some(step) {
            loss = f64::NAN;
        }
        if !loss.is_finite() {
            return Err(abort(state, format!("non-finite loss {loss} at step {step}")));
        }
        state.model.params.zero_grads();
        tape.backward(objective, &mut state.model.params)?;
        drop(tape);
        let grad_norm = global_grad_norm(&state.model.params);
        if !grad_norm.is_finite() {
            return Err(abort(state, format!("non-finite gradient norm at step {step}")));
        }
        clip_global_norm(&mut state.model.params, config.clip_norm);
        let lr = lr_at(config, step);
        if let Err(e) = adamw_step(&mut state.model.params, &mut state.optimizer, lr, config) {
            return Err(abort(state, format!("step {step}: {e}")));
        }
        state.step = step;
        state.tokens_seen += batch.scored_tokens() as u64;
        outcome.first_train_loss.get_or_insert(loss);
        outcome.final_train_loss = Some(loss);
        outcome.step = step;
        let mut record = MetricRecord {
            step,
            split: Split::Train,
            loss,
            lr,
            tokens_seen: state.tokens_seen,
            grad_norm,
        };
        metrics.write(&record)?;

        let last = step == config.total_steps;
        if last || (config.eval_interval > 0 && step % config.eval_interval == 0) {
            let val = evaluate(&state.model, data, config)?.loss;
            if !val.is_finite() {
                return Err(abort(state, format!("non-finite validation loss at step {step}")));
            }
            record.split = Split::Val;
            record.loss = val;
            metrics.write(&record)?;
            outcome.final_val_loss = Some(val);
        }
        if paths.halt_at == Some(step) && !last {
            outcome.halted = true;
            outcome.checkpoint = save(state, paths.last_checkpoint())?;
            return Ok(outcome);
        }
        if !last && config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
            save(state, paths.last_checkpoint())?;
        }
    }
    outcome.checkpoint = save(state, paths.final_checkpoint())?;
    Ok(outcome)
}
