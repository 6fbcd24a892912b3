use std::path::{Path, PathBuf};

use coe_core::train::{evaluate, load_checkpoint, read_metrics, train, Checkpoint, DataConfig, DataStream, RunPaths, Split, Task, TrainState};
use coe_core::{CoEConfig, DType, Error, Model, ModelConfig, TrainConfig};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt")
}

fn copy_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        vocab: 16,
        max_seq: 32,
        coe: CoEConfig {
            n_experts: 4,
            n_shared: 1,
            k: 2,
            c: 2,
            intermediate: 32,
            ..CoEConfig::default()
        },
        ..ModelConfig::default()
    }
    .resolved()
}

fn copy_train(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        batch_size: 4,
        seq_len: 24,
        eval_interval: 10,
        eval_sequences: 8,
        checkpoint_interval: 7,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn copy_data() -> DataConfig {
    DataConfig {
        task: Task::Copy,
        ..DataConfig::default()
    }
}

fn run(dir: &Path, tc: &TrainConfig, paths: RunPaths) -> coe_core::Result<coe_core::TrainOutcome> {
    let mc = copy_model();
    let data = DataStream::open(&copy_data(), tc, mc.vocab)?;
    let mut state = TrainState::fresh(Model::<f64>::new(mc, tc.seed)?);
    train(
        &mut state,
        &data,
        tc,
        &copy_data(),
        &RunPaths {
            out_dir: dir.to_path_buf(),
            ..paths
        },
    )
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let tc = copy_train(20);
    run(a.path(), &tc, RunPaths::default()).unwrap();
    run(b.path(), &tc, RunPaths::default()).unwrap();
    let read = |d: &Path| std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert!(std::fs::read(a.path().join("final.ckpt")).unwrap() == std::fs::read(b.path().join("final.ckpt")).unwrap());
    run(c.path(), &TrainConfig { seed: 12, ..tc }, RunPaths::default()).unwrap();
    assert_ne!(read(a.path()), read(c.path()));

    let records = read_metrics(&a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|r| r.split == Split::Train).count(), 20);
    let val: Vec<u64> = records.iter().filter(|r| r.split == Split::Val).map(|r| r.step).collect();
    assert_eq!(val, vec![10, 20]);
    assert!(records.windows(2).all(|w| w[0].tokens_seen <= w[1].tokens_seen));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (straight, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let tc = copy_train(25);
    run(straight.path(), &tc, RunPaths::default()).unwrap();
    let halted = run(
        split.path(),
        &tc,
        RunPaths {
            halt_at: Some(12),
            ..RunPaths::default()
        },
    )
    .unwrap();
    assert!(halted.halted);
    assert_eq!(halted.step, 12);
    assert!(!split.path().join("final.ckpt").exists());

    let ck = load_checkpoint(&split.path().join("last.ckpt")).unwrap();
    assert_eq!(ck.step, 12);
    let mut state: TrainState<f64> = ck.restore().unwrap();
    let data = DataStream::open(&ck.data, &ck.train, ck.model.vocab).unwrap();
    train(&mut state, &data, &ck.train, &ck.data, &RunPaths::new(split.path())).unwrap();

    let text = |d: &Path| std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    for (a, b) in text(straight.path()).lines().zip(text(split.path()).lines()) {
        assert_eq!(a, b);
    }
    assert_eq!(text(straight.path()).len(), text(split.path()).len());
    let bytes = |d: &Path| std::fs::read(d.join("final.ckpt")).unwrap();
    assert!(bytes(straight.path()) == bytes(split.path()), "final checkpoints differ");
}

#[test]
fn final_eval_reproduces_logged_loss() {
    let dir = tempfile::tempdir().unwrap();
    let tc = copy_train(10);
    let out = run(dir.path(), &tc, RunPaths::default()).unwrap();
    let ck = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    let state: TrainState<f64> = ck.restore().unwrap();
    let data = DataStream::open(&ck.data, &ck.train, ck.model.vocab).unwrap();
    let report = evaluate(&state.model, &data, &ck.train).unwrap();
    assert_eq!(Some(report.loss), out.final_val_loss);
}

#[test]
fn nan_loss_aborts_and_keeps_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(
        dir.path(),
        &copy_train(20),
        RunPaths {
            nan_at: Some(5),
            ..RunPaths::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let ck = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ck.step, 4);
    assert!(!dir.path().join("final.ckpt").exists());
    assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap().len(), 4);
}

#[test]
fn truncated_checkpoint_is_rejected_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &copy_train(3), RunPaths::default()).unwrap();
    let path = dir.path().join("final.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let good = Checkpoint::from_bytes(&bytes).unwrap();
    for cut in [0, 7, 8, 200, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })), "cut {cut}");
    }
    // the decoded checkpoint from before is untouched
    assert_eq!(Checkpoint::from_bytes(&good.to_bytes().unwrap()).unwrap(), good);
}

#[test]
fn untrained_byte_model_is_near_uniform() {
    let mc = ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 2,
        coe: CoEConfig {
            intermediate: 32,
            ..CoEConfig::default()
        },
        ..ModelConfig::default()
    }
    .resolved();
    let tc = TrainConfig {
        batch_size: 4,
        seq_len: 32,
        eval_sequences: 16,
        precision: DType::F32,
        ..TrainConfig::default()
    };
    let dc = DataConfig {
        path: Some(corpus()),
        ..DataConfig::default()
    };
    let data = DataStream::open(&dc, &tc, 256).unwrap();
    let model = Model::<f32>::new(mc, 0).unwrap();
    let loss = evaluate(&model, &data, &tc).unwrap().loss;
    assert!((loss - 256f64.ln()).abs() < 0.3, "{loss}");
}

#[test]
fn precision_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        precision: DType::F32,
        ..copy_train(3)
    };
    assert!(matches!(run(dir.path(), &tc, RunPaths::default()), Err(Error::Config(_))));
}

#[test]
fn copy_task_is_learned() {
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        lr: 3e-3,
        eval_interval: 100,
        checkpoint_interval: 0,
        ..copy_train(500)
    };
    let out = run(dir.path(), &tc, RunPaths::default()).unwrap();
    let (first, last) = (out.first_train_loss.unwrap(), out.final_train_loss.unwrap());
    eprintln!("copy task: {first} -> {last} (val {:?})", out.final_val_loss);
    assert!(last < 0.1 * first, "{first} -> {last}");
}
