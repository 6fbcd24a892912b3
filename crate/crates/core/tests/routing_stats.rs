use coe_core::analysis::{accumulate_coactivation, export_heatmap, read_heatmap};
use coe_core::train::{evaluate, DataStream};
use coe_core::{CoEConfig, Model, ModelConfig, TrainConfig};

fn model_config(k: usize, c: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 12,
        max_seq: 16,
        coe: CoEConfig {
            n_experts: 8,
            n_shared: 1,
            k,
            c,
            intermediate: 16,
            ..CoEConfig::default()
        },
        ..ModelConfig::default()
    }
    .resolved()
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seq_len: 16,
        eval_sequences: 12,
        ..TrainConfig::default()
    }
}

#[test]
fn invocations_per_token_match_the_budget() {
    for (k, c) in [(8, 1), (8, 2), (4, 2), (8, 4)] {
        let cfg = model_config(k, c);
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let data = DataStream::copy(&train_config(), cfg.vocab, 8, cfg.vocab).unwrap();
        let report = evaluate(&model, &data, &train_config()).unwrap();
        let tokens = 12 * 16;
        for (l, lt) in report.trace.layers.iter().enumerate() {
            assert_eq!((lt.tokens, lt.iterations), (tokens, c));
            for tok in 0..tokens {
                for it in 0..c {
                    assert_eq!(lt.selection(tok, it).len(), k / c, "K={k} C={c} layer {l}");
                }
            }
            let inv = &report.invocations[l];
            assert_eq!(inv.per_token.len(), tokens);
            assert!(inv.per_token.iter().all(|&n| n == k), "K={k} C={c} layer {l}");
        }
    }
}

#[test]
fn coactivation_totals_and_csv_round_trip() {
    let (k, c) = (4, 2);
    let cfg = model_config(k, c);
    let model = Model::<f64>::new(cfg.clone(), 8).unwrap();
    let data = DataStream::copy(&train_config(), cfg.vocab, 8, cfg.vocab).unwrap();
    let report = evaluate(&model, &data, &train_config()).unwrap();
    let co = accumulate_coactivation(&report.trace, 8).unwrap();
    assert!(co.warnings.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let kc = (k / c) as u64;
    for (m, lt) in co.matrices.iter().zip(&report.trace.layers) {
        assert_eq!(lt.tokens, 12 * 16);
        assert_eq!(m.total(), lt.tokens as u64 * kc * kc);
        let path = dir.path().join(format!("layer{}.csv", m.layer));
        export_heatmap(m, &path).unwrap();
        assert_eq!(&read_heatmap(&path).unwrap(), m);
    }
}

#[test]
fn single_iteration_yields_empty_matrices_with_warning() {
    let cfg = model_config(4, 1);
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let data = DataStream::copy(&train_config(), cfg.vocab, 8, cfg.vocab).unwrap();
    let report = evaluate(&model, &data, &train_config()).unwrap();
    let co = accumulate_coactivation(&report.trace, 8).unwrap();
    assert_eq!(co.warnings.len(), 2);
    assert!(co.matrices.iter().all(|m| m.total() == 0));
}
