//! `coe` command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 numeric abort.

mod config;

pub use config::{load_run_config, AnalysisConfig, RunConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use coe_core::analysis::{accumulate_coactivation, combination_ratio, cost_compare, export_heatmap};
use coe_core::model::{check_gradients, Batch};
use coe_core::rng::SeedTree;
use coe_core::train::{evaluate, load_checkpoint, train, Checkpoint, DataConfig, DataStream, RunPaths, TrainState};
use coe_core::{DType, Element, Error, Model, ModelConfig};
use rand::Rng;
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Gradient check pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Init scale of the default gradcheck model. At the training init of 0.02
/// many expert gradients sit near 1e-9, below central-difference roundoff.
pub const GRADCHECK_INIT_STD: f64 = 0.3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<i32, Failure>;

#[derive(Parser, Debug)]
#[command(name = "coe", version, about = "Chain-of-Experts training, evaluation and routing analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        /// Run config (JSON); every field is optional, see the defaults below.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics.jsonl, checkpoints and config.resolved.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; its stored configs are used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step and leave last.ckpt behind.
        #[arg(long)]
        halt_at: Option<u64>,
    },
    /// Held-out loss of a checkpoint plus per-layer co-activation CSVs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus to evaluate on instead of the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for the CSVs [default: next to the checkpoint].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact counts of routing paths, C(n,k)^c against C(n,ck).
    CountCombos {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        c: u64,
    },
    /// Analytic parameter and compute comparison of two run configs.
    CostModel {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
    },
    /// Central-difference check of the full loss gradient.
    Gradcheck {
        /// Run config whose `model` section is checked [default: the tiny model].
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cmd = Cli::command()
        .after_long_help(defaults_help())
        .mut_subcommand("train", |c| c.after_long_help(defaults_help()));
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            out: dir,
            seed,
            resume,
            halt_at,
        } => cmd_train(config.as_deref(), &dir, seed, resume.as_deref(), halt_at, out),
        Command::Eval { ckpt, data, out: dir } => cmd_eval(&ckpt, data.as_deref(), dir.as_deref(), out, err),
        Command::CountCombos { n, k, c } => cmd_count_combos(n, k, c, out),
        Command::CostModel { config_a, config_b } => cmd_cost_model(&config_a, &config_b, out),
        Command::Gradcheck {
            config,
            samples,
            seed,
            step,
            inject_fault,
        } => cmd_gradcheck(config.as_deref(), samples, seed, step, inject_fault, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn defaults_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("defaults serialize");
    format!("Run config defaults (any subset may be given; unknown keys are rejected):\n{defaults}")
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<(), Failure> {
    writeln!(out, "{value}").map_err(|e| Failure::usage(format!("writing output: {e}")))
}

fn cmd_train(config: Option<&Path>, dir: &Path, seed: Option<u64>, resume: Option<&Path>, halt_at: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let (run, resumed) = match resume {
        Some(ck_path) => {
            let ck = load_checkpoint(ck_path)?;
            let run = RunConfig {
                model: ck.model.clone(),
                train: ck.train.clone(),
                data: ck.data.clone(),
                ..RunConfig::default()
            };
            (run, Some(ck))
        }
        None => {
            let mut run = match config {
                Some(p) => load_run_config(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                run.train.seed = s;
            }
            (run, None)
        }
    };
    let run = run.resolved()?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let snapshot = serde_json::to_string_pretty(&run).map_err(Error::from)?;
    std::fs::write(dir.join("config.resolved.json"), snapshot + "\n").map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let paths = RunPaths {
        out_dir: dir.to_path_buf(),
        halt_at,
        nan_at: None,
    };
    let outcome = match run.train.precision {
        DType::F32 => train_as::<f32>(&run, resumed.as_ref(), &paths)?,
        DType::F64 => train_as::<f64>(&run, resumed.as_ref(), &paths)?,
    };
    emit(
        out,
        &json!({
            "step": outcome.step,
            "halted": outcome.halted,
            "final_train_loss": outcome.final_train_loss,
            "final_val_loss": outcome.final_val_loss,
            "checkpoint": outcome.checkpoint,
        }),
    )?;
    Ok(EXIT_OK)
}

fn train_as<T: Element>(run: &RunConfig, resumed: Option<&Checkpoint>, paths: &RunPaths) -> Result<coe_core::TrainOutcome, Failure> {
    let data = DataStream::open(&run.data, &run.train, run.model.vocab)?;
    let mut state = match resumed {
        Some(ck) => ck.restore::<T>()?,
        None => TrainState::fresh(Model::<T>::new(run.model.clone(), run.train.seed)?),
    };
    let outcome = train(&mut state, &data, &run.train, &run.data, paths)?;
    if let (Some(dir), false) = (&run.analysis.out_dir, outcome.halted) {
        let report = evaluate(&state.model, &data, &run.train)?;
        write_coactivation(&report.trace, run.model.coe.n_experts, dir, &mut std::io::sink())?;
    }
    Ok(outcome)
}

fn write_coactivation(trace: &coe_core::RoutingTrace, experts: usize, dir: &Path, err: &mut dyn Write) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let co = accumulate_coactivation(trace, experts)?;
    for w in &co.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    for m in &co.matrices {
        export_heatmap(m, &dir.join(format!("layer{}.csv", m.layer)))?;
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: Option<&Path>, dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let ck = load_checkpoint(ckpt)?;
    let mut data_cfg: DataConfig = ck.data.clone();
    if let Some(p) = data {
        data_cfg.path = Some(p.to_path_buf());
    }
    let stream = DataStream::open(&data_cfg, &ck.train, ck.model.vocab)?;
    let report = match ck.train.precision {
        DType::F32 => evaluate(&ck.restore::<f32>()?.model, &stream, &ck.train)?,
        DType::F64 => evaluate(&ck.restore::<f64>()?.model, &stream, &ck.train)?,
    };
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("coactivation"),
    };
    write_coactivation(&report.trace, ck.model.coe.n_experts, &dir, err)?;
    emit(out, &json!({ "val_loss": report.loss, "tokens": report.tokens }))?;
    Ok(EXIT_OK)
}

fn cmd_count_combos(n: u64, k: u64, c: u64, out: &mut dyn Write) -> CmdResult {
    let report = combination_ratio(n, k, c)?;
    emit(out, &serde_json::to_value(report).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}

fn cmd_cost_model(a: &Path, b: &Path, out: &mut dyn Write) -> CmdResult {
    let (a, b) = (load_run_config(a)?.resolved()?, load_run_config(b)?.resolved()?);
    let report = cost_compare(&a.model, &b.model)?;
    emit(out, &serde_json::to_value(report).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}

/// Random token batch for gradient checks: 2 sequences of up to 8 positions.
pub fn gradcheck_batch(model: &ModelConfig, seed: u64) -> Batch {
    let mut rng = SeedTree::new(seed).stream("gradcheck.batch", 0);
    let (seqs, len) = (2, model.max_seq.min(8));
    let mut tokens = || (0..seqs * len).map(|_| rng.random_range(0..model.vocab)).collect::<Vec<_>>();
    let inputs = tokens();
    let targets = tokens();
    Batch {
        inputs,
        targets,
        sequences: seqs,
        scored: None,
    }
}

fn cmd_gradcheck(config: Option<&Path>, samples: usize, seed: u64, step: f64, fault: bool, out: &mut dyn Write) -> CmdResult {
    if samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let model_cfg = match config {
        Some(p) => load_run_config(p)?.resolved()?.model,
        None => ModelConfig {
            init_std: GRADCHECK_INIT_STD,
            ..ModelConfig::tiny()
        }
        .resolved(),
    };
    let mut model = Model::<f64>::new(model_cfg.clone(), seed)?;
    let batch = gradcheck_batch(&model_cfg, seed);
    let report = check_gradients(&mut model, &batch, samples, step, seed, fault)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    emit(
        out,
        &json!({
            "pass": pass,
            "max_rel_error": report.max_rel_error,
            "tolerance": GRADCHECK_TOLERANCE,
            "samples": report.coordinates.len(),
            "routing_flips": report.routing_flips,
            "per_component": report.per_component,
        }),
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_VERIFY })
}
