//! Differentiable operations: forward evaluation and vector-Jacobian products.

use super::gemm::gemm;
use super::tape::{Node, Tape, Var};
use super::{Element, ParamId};
use crate::{Error, Result};

const ROPE_BASE: f64 = 10_000.0;

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    Rope {
        x: Var,
        seq: usize,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Broadcast class of a binary elementwise op.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl<T: Element> Tape<T> {
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((Bcast::Same, sa.to_vec()))
        } else if self.numel(b) == 1 {
            Ok((Bcast::RhsScalar, sa.to_vec()))
        } else if self.numel(a) == 1 {
            Ok((Bcast::LhsScalar, sb.to_vec()))
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, make: fn(Var, Var) -> Op<T>) -> Result<Var> {
        let (bc, shape) = self.binary_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = match bc {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::LhsScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        Ok(self.push(shape, out, make(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Silu(a), &[a])
    }

    /// `a (…×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (…×k) · bᵀ` with `b` stored `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = last_dim(&sa);
        let ok = sb.len() == 2 && if trans_b { sb[1] == k } else { sb[0] == k };
        if !ok {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = if trans_b { sb[0] } else { sb[1] };
        let m = self.numel(a) / k;
        let mut out = vec![T::zero(); m * n];
        gemm(false, trans_b, m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = vec![T::zero(); xs.len()];
        for (row, o) in xs.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_into(row, o);
        }
        Ok(self.push(shape, out, Op::SoftmaxRows(x), &[x]))
    }

    /// Root-mean-square normalization over the last axis, then elementwise `weight`.
    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if self.shape(weight) != [d] {
            return Err(Error::Dimension {
                op: "rmsnorm",
                lhs: shape,
                rhs: self.shape(weight).to_vec(),
            });
        }
        if eps < 0.0 {
            return Err(Error::Usage(format!("rmsnorm eps must be nonnegative, got {eps}")));
        }
        let eps = T::of(eps);
        let (xs, w) = (self.value(x), self.value(weight));
        let rows = xs.len() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xs.len()];
        let dt = T::of(d as f64);
        for (row, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &v), &wv) in o.iter_mut().zip(row).zip(w) {
                *o = v * r * wv;
            }
        }
        Ok(self.push(shape, out, Op::RmsNorm { x, w: weight, inv_rms }, &[x, weight]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = last_dim(&shape);
        let rows = self.numel(logits) / vocab;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {t} out of range for vocabulary {vocab}")));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for ((row, p), &t) in xs.chunks_exact(vocab).zip(probs.chunks_exact_mut(vocab)).zip(targets) {
            let (imax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let mut others = T::zero();
            for (j, (&v, pj)) in row.iter().zip(p.iter_mut()).enumerate() {
                let e = (v - max).exp();
                *pj = e;
                if j != imax {
                    others += e;
                }
            }
            let denom = T::one() + others;
            p.iter_mut().for_each(|v| *v = *v / denom);
            // ln(sum exp(x - max)) via ln_1p keeps tiny losses exact
            total += others.ln_1p() - (row[t] - max);
        }
        let loss = total / T::of(rows as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Selects rows of a matrix (the leading axes are flattened into rows).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let d = last_dim(self.shape(x));
        let rows = self.numel(x) / d;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows needs at least one index".into()));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Builds a `rows×cols` matrix of zeros and adds row `j` of each part to
    /// output row `idx[j]`.
    pub fn scatter_rows(&mut self, rows: usize, cols: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = vec![T::zero(); rows * cols];
        for (v, idx) in &parts {
            let shape = self.shape(*v);
            if shape.len() != 2 || shape[1] != cols || shape[0] != idx.len() {
                return Err(Error::Dimension {
                    op: "scatter_rows",
                    lhs: shape.to_vec(),
                    rhs: vec![idx.len(), cols],
                });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
            }
            let vs = self.value(*v);
            for (src, &dst) in vs.chunks_exact(cols).zip(idx) {
                for (o, &s) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let operands: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        Ok(self.push(vec![rows, cols], out, Op::ScatterRows { parts }, &operands))
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.numel(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("element {bad} out of range for {n} elements")));
        }
        if idx.is_empty() {
            return Err(Error::Usage("gather_elems needs at least one index".into()));
        }
        let xs = self.value(x);
        let out = idx.iter().map(|&i| xs[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::GatherElems { x, idx: idx.to_vec() }, &[x]))
    }

    /// Multiplies row `i` of `x (m×d)` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let m = self.numel(x) / d;
        if self.numel(w) != m {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: shape,
                rhs: self.shape(w).to_vec(),
            });
        }
        let (xs, ws) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(xs.len());
        for (row, &s) in xs.chunks_exact(d).zip(ws) {
            out.extend(row.iter().map(|&v| v * s));
        }
        Ok(self.push(shape, out, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Rotary position embedding on interleaved channel pairs of each head.
    /// Rows are `batch × seq` positions flattened; the position of row `r` is `r % seq`.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let rows = self.numel(x) / d;
        check_heads("rope", &shape, rows, d, seq, heads)?;
        let hd = d / heads;
        if !hd.is_multiple_of(2) {
            return Err(Error::Usage(format!("rope needs an even head dimension, got {hd}")));
        }
        let (cos, sin) = rope_tables::<T>(seq, hd);
        let mut out = self.value(x).to_vec();
        rotate(&mut out, d, seq, hd, &cos, &sin, false);
        Ok(self.push(shape, out, Op::Rope { x, seq, heads }, &[x]))
    }

    /// Causal multi-head scaled dot-product attention on `batch × seq` rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let d = last_dim(&shape);
        let rows = self.numel(q) / d;
        check_heads("causal_attention", &shape, rows, d, seq, heads)?;
        let hd = d / heads;
        let batch = rows / seq;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * d + col..][..hd];
                    let prow = &mut probs[pbase + i * seq..][..i + 1];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &ks[(b * seq + j) * d + col..][..hd];
                        *p = dot(qi, kj) * scale;
                    }
                    let max = prow.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for p in prow.iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let oi = &mut out[(b * seq + i) * d + col..][..hd];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = *p / z;
                        let vj = &vs[(b * seq + j) * d + col..][..hd];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += *p * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, seq, heads, probs };
        Ok(self.push(shape, out, op, &[q, k, v]))
    }
}

fn check_heads(op: &'static str, shape: &[usize], rows: usize, d: usize, seq: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) || seq == 0 || !rows.is_multiple_of(seq) {
        return Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![seq, heads],
        });
    }
    Ok(())
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_into<T: Element>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / z);
}

fn rope_tables<T: Element>(seq: usize, hd: usize) -> (Vec<T>, Vec<T>) {
    let half = hd / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for p in 0..seq {
        for i in 0..half {
            let theta = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
            cos.push(T::of(theta.cos()));
            sin.push(T::of(theta.sin()));
        }
    }
    (cos, sin)
}

/// In-place rotation of every (2i, 2i+1) pair; `inverse` applies the transpose.
fn rotate<T: Element>(buf: &mut [T], d: usize, seq: usize, hd: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = hd / 2;
    for (r, row) in buf.chunks_exact_mut(d).enumerate() {
        let p = r % seq;
        let (c, s) = (&cos[p * half..][..half], &sin[p * half..][..half]);
        for head in row.chunks_exact_mut(hd) {
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = x0 * c[i] - x1 * sn;
                head[2 * i + 1] = x0 * sn + x1 * c[i];
            }
        }
    }
}

fn reduce_sum<T: Element>(g: &[T]) -> T {
    g.iter().copied().sum()
}

impl<T: Element> Op<T> {
    /// Accumulates the vector-Jacobian product of `node` into its operands' slots.
    pub(crate) fn backprop(&self, tape: &Tape<T>, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match self {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = tape.shape(*a);
                let k = last_dim(sa);
                let m = tape.numel(*a) / k;
                let n = last_dim(&node.shape);
                if let Some(ga) = tape.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(false, !trans_b, m, n, k, g, tape.value(*b), T::one(), ga);
                }
                if let Some(gb) = tape.slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(true, false, n, m, k, g, tape.value(*a), T::one(), gb);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(true, false, k, m, n, tape.value(*a), g, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self, Op::Sub(..)) { -T::one() } else { T::one() };
                let ga_scalar = tape.numel(*a) == 1 && tape.numel(*b) != 1;
                let gb_scalar = tape.numel(*b) == 1 && tape.numel(*a) != 1;
                if let Some(ga) = tape.slot(grads, *a) {
                    if ga_scalar {
                        ga[0] += reduce_sum(g);
                    } else {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(gb) = tape.slot(grads, *b) {
                    if gb_scalar {
                        gb[0] += sign * reduce_sum(g);
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.value(*a), tape.value(*b));
                let at = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if let Some(ga) = tape.slot(grads, *a) {
                    if ga.len() == 1 && g.len() != 1 {
                        ga[0] += g.iter().enumerate().map(|(i, &gi)| gi * at(vb, i)).sum::<T>();
                    } else {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * at(vb, i);
                        }
                    }
                }
                if let Some(gb) = tape.slot(grads, *b) {
                    if gb.len() == 1 && g.len() != 1 {
                        gb[0] += g.iter().enumerate().map(|(i, &gi)| gi * at(va, i)).sum::<T>();
                    } else {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += g[i] * at(va, i);
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = tape.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Silu(a) => {
                let fault = if tape.fault { T::of(1.1) } else { T::one() };
                let va = tape.value(*a);
                if let Some(ga) = tape.slot(grads, *a) {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(va) {
                        let s = sigmoid(v);
                        *x += gi * s * (T::one() + v * (T::one() - s)) * fault;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = last_dim(&node.shape);
                if let Some(ga) = tape.slot(grads, *a) {
                    for ((y, gy), gx) in node.value.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let inner = dot(y, gy);
                        for ((x, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
                            *x += yi * (gi - inner);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let d = last_dim(&node.shape);
                let dt = T::of(d as f64);
                let (xs, ws) = (tape.value(*x), tape.value(*w));
                if let Some(gw) = tape.slot(grads, *w) {
                    for ((row, gr), &r) in xs.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for ((acc, &v), &gi) in gw.iter_mut().zip(row).zip(gr) {
                            *acc += gi * v * r;
                        }
                    }
                }
                if let Some(gx) = tape.slot(grads, *x) {
                    for (((row, gr), out), &r) in xs.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).zip(inv_rms) {
                        let proj = row.iter().zip(gr).zip(ws).map(|((&v, &gi), &wi)| gi * wi * v).sum::<T>();
                        let c = r * r * r / dt * proj;
                        for (((o, &v), &gi), &wi) in out.iter_mut().zip(row).zip(gr).zip(ws) {
                            *o += r * wi * gi - c * v;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = last_dim(tape.shape(*logits));
                let scale = g[0] / T::of(targets.len() as f64);
                if let Some(gl) = tape.slot(grads, *logits) {
                    for ((out, p), &t) in gl.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).zip(targets) {
                        for (o, &pi) in out.iter_mut().zip(p) {
                            *o += pi * scale;
                        }
                        out[t] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = tape.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::GatherRows { x, idx } => {
                let d = last_dim(&node.shape);
                if let Some(gx) = tape.slot(grads, *x) {
                    for (gr, &i) in g.chunks_exact(d).zip(idx) {
                        for (o, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterRows { parts } => {
                let cols = node.shape[1];
                for (v, idx) in parts {
                    if let Some(gv) = tape.slot(grads, *v) {
                        for (out, &i) in gv.chunks_exact_mut(cols).zip(idx) {
                            for (o, &s) in out.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                                *o += s;
                            }
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(gx) = tape.slot(grads, *x) {
                    for (&gi, &i) in g.iter().zip(idx) {
                        gx[i] += gi;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let d = last_dim(&node.shape);
                let (xs, ws) = (tape.value(*x), tape.value(*w));
                if let Some(gw) = tape.slot(grads, *w) {
                    for ((acc, row), gr) in gw.iter_mut().zip(xs.chunks_exact(d)).zip(g.chunks_exact(d)) {
                        *acc += dot(row, gr);
                    }
                }
                if let Some(gx) = tape.slot(grads, *x) {
                    for ((out, gr), &s) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(ws) {
                        for (o, &gi) in out.iter_mut().zip(gr) {
                            *o += gi * s;
                        }
                    }
                }
            }
            Op::Rope { x, seq, heads } => {
                let d = last_dim(&node.shape);
                let hd = d / heads;
                if let Some(gx) = tape.slot(grads, *x) {
                    let (cos, sin) = rope_tables::<T>(*seq, hd);
                    let mut back = g.to_vec();
                    rotate(&mut back, d, *seq, hd, &cos, &sin, true);
                    gx.iter_mut().zip(&back).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Attention { q, k, v, seq, heads, probs } => attention_backward(tape, node, g, grads, (*q, *k, *v), *seq, *heads, probs),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Element>(
    tape: &Tape<T>,
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    (q, k, v): (Var, Var, Var),
    seq: usize,
    heads: usize,
    probs: &[T],
) {
    let d = last_dim(&node.shape);
    let rows = node.value.len() / d;
    let batch = rows / seq;
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let (qs, ks, vs) = (tape.value(q), tape.value(k), tape.value(v));
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut ds = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let ri = (b * seq + i) * d + col;
                let goi = &g[ri..][..hd];
                let prow = &probs[pbase + i * seq..][..i + 1];
                let mut inner = T::zero();
                for (j, &p) in prow.iter().enumerate() {
                    let rj = (b * seq + j) * d + col;
                    let dp = dot(goi, &vs[rj..][..hd]);
                    ds[j] = dp;
                    inner += p * dp;
                    for (o, &gv) in dv[rj..][..hd].iter_mut().zip(goi) {
                        *o += p * gv;
                    }
                }
                for (j, &p) in prow.iter().enumerate() {
                    let rj = (b * seq + j) * d + col;
                    let s = p * (ds[j] - inner) * scale;
                    for c in 0..hd {
                        dq[ri + c] += s * ks[rj + c];
                        dk[rj + c] += s * qs[ri + c];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(slot) = tape.slot(grads, var) {
            slot.iter_mut().zip(&buf).for_each(|(o, &x)| *o += x);
        }
    }
}
