//! Decoder-only transformer whose FFN sublayers are CoE layers.
//!
//! Blocks are pre-norm: `x += attn(rmsnorm(x))`, then `x += coe(rmsnorm(x))`.
//! Attention is standard causal multi-head attention with rotary embeddings
//! on queries and keys. The output head is untied from the input embedding.

mod count;
mod gradcheck;

pub use count::{param_count, ParamCount};
pub use gradcheck::{check_gradients, CoordinateCheck, ModelGradReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::coe::{coe_forward, CoEConfig, CoELayer, GatingMode, ResidualMode, RoutingTrace};
use crate::experts::{normal_tensor, Invocations};
use crate::rng::SeedTree;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    /// Standard deviation of the normal initialization of every projection.
    pub init_std: f64,
    /// Sparse FFN settings; `coe.hidden` always follows `hidden`.
    pub coe: CoEConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab: 256,
            max_seq: 256,
            norm_eps: 1e-6,
            init_std: 0.02,
            coe: CoEConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            vocab: 17,
            max_seq: 16,
            norm_eps: 1e-6,
            init_std: 0.02,
            coe: CoEConfig {
                n_experts: 4,
                n_shared: 1,
                k: 2,
                c: 2,
                residual: ResidualMode::Inner,
                gating: GatingMode::PerIteration,
                intermediate: 64,
                hidden: 32,
                load_balance_coef: 0.0,
            },
        }
    }

    /// Published reference shape: 4 layers of width 1024 with 8 heads,
    /// 63 routed + 1 shared expert of intermediate size 704, K = 8 over C = 2.
    pub fn reference_scale() -> Self {
        Self {
            layers: 4,
            hidden: 1024,
            heads: 8,
            vocab: 102_400,
            max_seq: 512,
            norm_eps: 1e-6,
            init_std: 0.02,
            coe: CoEConfig {
                n_experts: 63,
                n_shared: 1,
                k: 8,
                c: 2,
                residual: ResidualMode::Inner,
                gating: GatingMode::PerIteration,
                intermediate: 704,
                hidden: 1024,
                load_balance_coef: 0.0,
            },
        }
    }

    /// Copies `hidden` into the CoE section.
    pub fn resolved(mut self) -> Self {
        self.coe.hidden = self.hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.max_seq == 0 {
            return Err(Error::Config("layers, hidden and max_seq must be positive".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) || !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden {} must split into {} heads of even width",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary must have at least 2 symbols".into()));
        }
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("norm_eps must be > 0 and init_std >= 0".into()));
        }
        if self.coe.hidden != self.hidden {
            return Err(Error::Config(format!("coe.hidden {} differs from hidden {}", self.coe.hidden, self.hidden)));
        }
        self.coe.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub coe: CoELayer,
}

/// Token ids of `sequences` equal-length rows, with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub sequences: usize,
    /// Rows that contribute to the loss; `None` scores every row.
    pub scored: Option<Vec<usize>>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.inputs.len() / self.sequences.max(1)
    }

    pub fn scored_tokens(&self) -> usize {
        self.scored.as_ref().map_or(self.inputs.len(), Vec::len)
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub trace: RoutingTrace,
    /// Per-layer expert invocation counters.
    pub invocations: Vec<Invocations>,
    pub aux_loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

fn ones<T: Element>(d: usize) -> Tensor<T> {
    Tensor::new(vec![d], vec![T::one(); d]).expect("positive extent")
}

impl<T: Element> Model<T> {
    /// Builds a freshly initialized model. Each component draws from its own
    /// seed stream, so changing one layer's shape leaves the others' weights intact.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(seed);
        let (d, v, std) = (config.hidden, config.vocab, config.init_std);
        let mut params = ParamStore::new();
        let embed = params.register("embed", normal_tensor(vec![v, d], std, &mut seeds.stream("init.embed", 0)), false)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let rng = &mut seeds.stream("init.layer", l as u64);
            let p = format!("layer.{l}");
            let attn_norm = params.register(format!("{p}.attn_norm"), ones(d), false)?;
            let wq = params.register(format!("{p}.attn.q"), normal_tensor(vec![d, d], std, rng), true)?;
            let wk = params.register(format!("{p}.attn.k"), normal_tensor(vec![d, d], std, rng), true)?;
            let wv = params.register(format!("{p}.attn.v"), normal_tensor(vec![d, d], std, rng), true)?;
            let wo = params.register(format!("{p}.attn.o"), normal_tensor(vec![d, d], std, rng), true)?;
            let ffn_norm = params.register(format!("{p}.ffn_norm"), ones(d), false)?;
            let coe = CoELayer::register(&mut params, &p, &config.coe, std, rng)?;
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                coe,
            });
        }
        let final_norm = params.register("final_norm", ones(d), false)?;
        let head = params.register("head", normal_tensor(vec![d, v], std, &mut seeds.stream("init.head", 0)), true)?;
        Ok(Self {
            config,
            params,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    /// Forward pass over `sequences` rows of equal length packed in `ids`.
    pub fn forward(&self, tape: &mut Tape<T>, ids: &[usize], sequences: usize) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if sequences == 0 || ids.is_empty() || !ids.len().is_multiple_of(sequences) {
            return Err(Error::Usage(format!("{} ids do not split into {sequences} sequences", ids.len())));
        }
        let seq = ids.len() / sequences;
        if seq > cfg.max_seq {
            return Err(Error::Usage(format!("sequence length {seq} exceeds max_seq {}", cfg.max_seq)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab) {
            return Err(Error::Index(format!("token id {bad} out of range for vocabulary {}", cfg.vocab)));
        }
        let store = &self.params;
        let embed = tape.param(store, self.embed);
        let mut x = tape.gather_rows(embed, ids)?;
        let mut trace = RoutingTrace::default();
        let mut invocations = Vec::with_capacity(self.blocks.len());
        let mut aux: Option<Var> = None;
        for b in &self.blocks {
            let norm_w = tape.param(store, b.attn_norm);
            let h = tape.rmsnorm(x, norm_w, cfg.norm_eps)?;
            let (wq, wk, wv, wo) = (
                tape.param(store, b.wq),
                tape.param(store, b.wk),
                tape.param(store, b.wv),
                tape.param(store, b.wo),
            );
            let q = tape.matmul(h, wq)?;
            let q = tape.rope(q, seq, cfg.heads)?;
            let k = tape.matmul(h, wk)?;
            let k = tape.rope(k, seq, cfg.heads)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.causal_attention(q, k, v, seq, cfg.heads)?;
            let o = tape.matmul(a, wo)?;
            x = tape.add(x, o)?;

            let norm_w = tape.param(store, b.ffn_norm);
            let h = tape.rmsnorm(x, norm_w, cfg.norm_eps)?;
            let out = coe_forward(tape, store, &b.coe, h)?;
            x = tape.add(x, out.y)?;
            trace.layers.push(out.trace);
            invocations.push(out.invocations);
            if let Some(a) = out.aux_loss {
                aux = Some(match aux {
                    Some(prev) => tape.add(prev, a)?,
                    None => a,
                });
            }
        }
        let norm_w = tape.param(store, self.final_norm);
        let x = tape.rmsnorm(x, norm_w, cfg.norm_eps)?;
        let head = tape.param(store, self.head);
        let logits = tape.matmul(x, head)?;
        Ok(ForwardOutput {
            logits,
            trace,
            invocations,
            aux_loss: aux,
        })
    }

    /// Cross-entropy over the scored rows, plus the load-balance penalty when enabled.
    ///
    /// Returns `(objective, cross_entropy, forward)`.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<(Var, Var, ForwardOutput)> {
        if batch.targets.len() != batch.inputs.len() {
            return Err(Error::Usage("targets must align with inputs".into()));
        }
        let out = self.forward(tape, &batch.inputs, batch.sequences)?;
        let ce = match &batch.scored {
            None => tape.cross_entropy(out.logits, &batch.targets)?,
            Some(rows) => {
                let picked = tape.gather_rows(out.logits, rows)?;
                let targets: Vec<usize> = rows.iter().map(|&r| batch.targets[r]).collect();
                tape.cross_entropy(picked, &targets)?
            }
        };
        let total = match out.aux_loss {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        Ok((total, ce, out))
    }

    /// Component label of a parameter name, used for reporting.
    pub fn component(name: &str) -> &'static str {
        if name == "embed" {
            "embed"
        } else if name == "head" {
            "head"
        } else if name.ends_with("norm") {
            "norm"
        } else if name.contains(".attn.") {
            "attention"
        } else if name.contains(".router.") {
            "router"
        } else if name.contains(".shared.") {
            "shared_expert"
        } else if name.contains(".expert.") {
            "routed_expert"
        } else {
            "other"
        }
    }
}
