mod common;

use coe_core::autodiff::finite_diff_check;
use coe_core::model::{check_gradients, Batch};
use coe_core::{Model, ModelConfig, Result, Tape, Tensor, Var};
use common::{random_tensor, rng};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// `Σ w ⊙ y` with a fixed random `w`, so every output coordinate matters.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.shape(y), 1.0, &mut rng(seed ^ 0xabc));
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, shape: &[usize], seeds: u64, f: impl Fn(&mut Tape<f64>, Var, u64) -> Result<Var>) {
    for seed in 0..seeds {
        let point = random_tensor(shape, 1.0, &mut rng(seed));
        let report = finite_diff_check(|t, x| f(t, x, seed), &point, H).unwrap();
        assert!(report.max_rel_error < TOL, "{name} seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[3, 4], 10, |t, x, s| {
        let c = t.constant(&random_tensor(&[3, 4], 1.0, &mut rng(s + 50)));
        let y = t.add(x, c)?;
        weighted(t, y, s)
    });
    check("sub", &[3, 4], 10, |t, x, s| {
        let c = t.constant(&random_tensor(&[3, 4], 1.0, &mut rng(s + 50)));
        let y = t.sub(c, x)?;
        weighted(t, y, s)
    });
    check("mul", &[3, 4], 10, |t, x, s| {
        let y = t.mul(x, x)?;
        weighted(t, y, s)
    });
    check("scalar broadcast", &[1], 10, |t, x, s| {
        let c = t.constant(&random_tensor(&[2, 3], 1.0, &mut rng(s + 50)));
        let y = t.mul(c, x)?;
        let y = t.add(y, x)?;
        weighted(t, y, s)
    });
    check("silu", &[5, 3], 10, |t, x, s| {
        let y = t.silu(x);
        let y = t.scale(y, -1.5);
        weighted(t, y, s)
    });
    check("mean", &[4, 2], 10, |t, x, _| {
        let y = t.mul(x, x)?;
        Ok(t.mean(y))
    });
}

#[test]
fn matrix_products() {
    check("matmul lhs", &[3, 4], 10, |t, x, s| {
        let b = t.constant(&random_tensor(&[4, 5], 1.0, &mut rng(s + 9)));
        let y = t.matmul(x, b)?;
        weighted(t, y, s)
    });
    check("matmul rhs", &[4, 5], 10, |t, x, s| {
        let a = t.constant(&random_tensor(&[3, 4], 1.0, &mut rng(s + 9)));
        let y = t.matmul(a, x)?;
        weighted(t, y, s)
    });
    check("matmul_nt rhs", &[5, 4], 10, |t, x, s| {
        let a = t.constant(&random_tensor(&[3, 4], 1.0, &mut rng(s + 9)));
        let y = t.matmul_nt(a, x)?;
        weighted(t, y, s)
    });
}

#[test]
fn normalizations_and_losses() {
    check("softmax", &[3, 6], 10, |t, x, s| {
        let y = t.softmax_rows(x)?;
        weighted(t, y, s)
    });
    check("rmsnorm x", &[3, 6], 10, |t, x, s| {
        let w = t.constant(&random_tensor(&[6], 1.0, &mut rng(s + 3)));
        let y = t.rmsnorm(x, w, 1e-6)?;
        weighted(t, y, s)
    });
    check("rmsnorm weight", &[6], 10, |t, w, s| {
        let x = t.constant(&random_tensor(&[3, 6], 1.0, &mut rng(s + 3)));
        let y = t.rmsnorm(x, w, 1e-6)?;
        weighted(t, y, s)
    });
    check("cross entropy", &[4, 7], 10, |t, x, s| {
        let mut r = rng(s + 4);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
        t.cross_entropy(x, &targets)
    });
}

#[test]
fn indexing_ops() {
    check("gather_rows", &[4, 3], 10, |t, x, s| {
        let y = t.gather_rows(x, &[2, 0, 2, 3])?;
        weighted(t, y, s)
    });
    check("scatter_rows", &[3, 2], 10, |t, x, s| {
        let other = t.constant(&random_tensor(&[2, 2], 1.0, &mut rng(s + 1)));
        let y = t.scatter_rows(5, 2, vec![(x, vec![4, 1, 4]), (other, vec![1, 0])])?;
        weighted(t, y, s)
    });
    check("gather_elems", &[3, 3], 10, |t, x, s| {
        let y = t.gather_elems(x, &[8, 0, 4, 4])?;
        weighted(t, y, s)
    });
    check("scale_rows x", &[3, 4], 10, |t, x, s| {
        let w = t.constant(&random_tensor(&[3], 1.0, &mut rng(s + 2)));
        let y = t.scale_rows(x, w)?;
        weighted(t, y, s)
    });
    check("scale_rows w", &[3], 10, |t, w, s| {
        let x = t.constant(&random_tensor(&[3, 4], 1.0, &mut rng(s + 2)));
        let y = t.scale_rows(x, w)?;
        weighted(t, y, s)
    });
}

#[test]
fn positional_and_attention_ops() {
    // 2 sequences of 3 positions, 2 heads of width 4
    check("rope", &[6, 8], 10, |t, x, s| {
        let y = t.rope(x, 3, 2)?;
        weighted(t, y, s)
    });
    for which in 0..3 {
        check("attention", &[6, 8], 10, move |t, x, s| {
            let mut others = (0..2).map(|i| t.constant(&random_tensor(&[6, 8], 1.0, &mut rng(s * 7 + i))));
            let (a, b) = (others.next().unwrap(), others.next().unwrap());
            let (q, k, v) = match which {
                0 => (x, a, b),
                1 => (a, x, b),
                _ => (a, b, x),
            };
            let y = t.causal_attention(q, k, v, 3, 2)?;
            weighted(t, y, s)
        });
    }
}

#[test]
fn attention_is_causal() {
    let q = random_tensor(&[8, 8], 1.0, &mut rng(1));
    let k = random_tensor(&[8, 8], 1.0, &mut rng(2));
    let v = random_tensor(&[8, 8], 1.0, &mut rng(3));
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut t = Tape::new();
        let (q, k, v) = (t.constant(&q), t.constant(k), t.constant(v));
        let y = t.causal_attention(q, k, v, 8, 2).unwrap();
        t.value(y).to_vec()
    };
    let base = run(&k, &v);
    // perturb position 5 only; rows 0..5 must not move
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for c in 0..8 {
        k2.data_mut()[5 * 8 + c] += 3.0;
        v2.data_mut()[5 * 8 + c] -= 2.0;
    }
    let moved = run(&k2, &v2);
    assert_eq!(&base[..5 * 8], &moved[..5 * 8]);
    assert_ne!(&base[5 * 8..6 * 8], &moved[5 * 8..6 * 8]);
}

fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut r = rng(seed);
    let (seqs, len) = (2, 8);
    let inputs: Vec<usize> = (0..seqs * len).map(|_| r.random_range(0..cfg.vocab)).collect();
    let targets: Vec<usize> = (0..seqs * len).map(|_| r.random_range(0..cfg.vocab)).collect();
    Batch {
        inputs,
        targets,
        sequences: seqs,
        scored: None,
    }
}

#[test]
fn tiny_model_matches_finite_differences() {
    for seed in 0..3 {
        // at init 0.02 some gradients fall under the finite-difference noise floor
        let cfg = ModelConfig {
            init_std: 0.3,
            ..ModelConfig::tiny()
        };
        let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let batch = tiny_batch(&cfg, 100 + seed);
        let report = check_gradients(&mut model, &batch, 200, H, seed, false).unwrap();
        assert!(report.coordinates.len() >= 200);
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {} {:?}", report.max_rel_error, report.per_component);
        for comp in ["attention", "router", "routed_expert", "shared_expert", "norm", "head", "embed"] {
            assert!(report.per_component.contains_key(comp), "no {comp} coordinate sampled");
        }
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f64>::new(cfg.clone(), 0).unwrap();
    let batch = tiny_batch(&cfg, 1);
    let report = check_gradients(&mut model, &batch, 100, H, 0, true).unwrap();
    assert!(report.max_rel_error > 1e-2, "{}", report.max_rel_error);
}
