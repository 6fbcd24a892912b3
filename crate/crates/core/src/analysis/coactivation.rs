use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::coe::RoutingTrace;
use crate::{Error, Result};

const HEADER: [&str; 5] = ["layer", "prev_expert", "next_expert", "count", "row_normalized"];

/// `N×N` counts of (expert at iteration t, expert at iteration t+1) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoActivationMatrix {
    pub layer: usize,
    pub experts: usize,
    counts: Vec<u64>,
}

impl CoActivationMatrix {
    pub fn new(layer: usize, experts: usize) -> Self {
        Self {
            layer,
            experts,
            counts: vec![0; experts * experts],
        }
    }

    pub fn get(&self, prev: usize, next: usize) -> u64 {
        self.counts[prev * self.experts + next]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn nonzero(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Rows scaled to sum to one; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Vec<f64> {
        let n = self.experts;
        let mut out = vec![0.0; n * n];
        for p in 0..n {
            let row = &self.counts[p * n..(p + 1) * n];
            let s: u64 = row.iter().sum();
            if s > 0 {
                for (o, &c) in out[p * n..(p + 1) * n].iter_mut().zip(row) {
                    *o = c as f64 / s as f64;
                }
            }
        }
        out
    }

    /// Elementwise sum with another accumulator for the same layer.
    pub fn merge(&mut self, other: &CoActivationMatrix) -> Result<()> {
        if self.experts != other.experts || self.layer != other.layer {
            return Err(Error::Usage("co-activation matrices differ in layer or size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CoActivation {
    pub matrices: Vec<CoActivationMatrix>,
    pub warnings: Vec<String>,
}

/// For every token and consecutive iteration pair, counts each
/// `(prev, next)` in the cross product of the two selected sets.
pub fn accumulate_coactivation(trace: &RoutingTrace, experts: usize) -> Result<CoActivation> {
    let mut matrices = Vec::with_capacity(trace.layers.len());
    let mut warnings = Vec::new();
    for (l, lt) in trace.layers.iter().enumerate() {
        let mut m = CoActivationMatrix::new(l, experts);
        if lt.iterations < 2 {
            warnings.push(format!("layer {l}: {} routing iteration(s), co-activation is empty", lt.iterations));
        }
        for tok in 0..lt.tokens {
            for it in 1..lt.iterations {
                let (prev, next) = (lt.selection(tok, it - 1), lt.selection(tok, it));
                for &p in prev {
                    for &q in next {
                        if p >= experts || q >= experts {
                            return Err(Error::Usage(format!("trace names expert {} but the layer has {experts}", p.max(q))));
                        }
                        m.counts[p * experts + q] += 1;
                    }
                }
            }
        }
        matrices.push(m);
    }
    Ok(CoActivation { matrices, warnings })
}

/// Writes one CSV row per nonzero entry followed by a `#` summary line.
pub fn export_heatmap(matrix: &CoActivationMatrix, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io)?);
    w.write_record(HEADER).map_err(csv_err)?;
    let norm = matrix.row_normalized();
    let n = matrix.experts;
    for p in 0..n {
        for q in 0..n {
            let c = matrix.get(p, q);
            if c > 0 {
                w.write_record([
                    matrix.layer.to_string(),
                    p.to_string(),
                    q.to_string(),
                    c.to_string(),
                    norm[p * n + q].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let mut file = w.into_inner().map_err(|e| io(e.into_error()))?;
    writeln!(
        file,
        "# summary layer={} experts={} total={} nonzero={}",
        matrix.layer,
        n,
        matrix.total(),
        matrix.nonzero()
    )
    .map_err(io)?;
    file.flush().map_err(io)
}

/// Parses a file written by [`export_heatmap`].
pub fn read_heatmap(path: &Path) -> Result<CoActivationMatrix> {
    let io = |e: std::io::Error| Error::io(path, e);
    let bad = |m: String| Error::Usage(format!("{}: {m}", path.display()));
    let mut summary: Option<(usize, usize, u64)> = None;
    for line in BufReader::new(File::open(path).map_err(io)?).lines() {
        let line = line.map_err(io)?;
        if let Some(rest) = line.strip_prefix("# summary") {
            let field = |key: &str| -> Result<u64> {
                rest.split_whitespace()
                    .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                    .ok_or_else(|| bad(format!("summary lacks `{key}`")))?
                    .parse()
                    .map_err(|_| bad(format!("summary field `{key}` is not an integer")))
            };
            summary = Some((field("layer")? as usize, field("experts")? as usize, field("total")?));
        }
    }
    let (layer, experts, total) = summary.ok_or_else(|| bad("missing summary line".into()))?;
    let mut m = CoActivationMatrix::new(layer, experts);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| io(e.into()))?;
    let header = rdr.headers().map_err(|e| io(e.into()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io(e.into()))?;
        let num = |i: usize| -> Result<u64> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("bad field {i} in {rec:?}"))) };
        let (p, q, c) = (num(1)? as usize, num(2)? as usize, num(3)?);
        if p >= experts || q >= experts {
            return Err(bad(format!("expert index out of range in {rec:?}")));
        }
        m.counts[p * experts + q] = c;
    }
    if m.total() != total {
        return Err(bad(format!("rows sum to {} but summary says {total}", m.total())));
    }
    Ok(m)
}
