use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExposureMatrix;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::panel::{QuarterTag, NUM_MACRO};

/// Edges whose weight falls below this fraction of the receiver's Tier 1 capital are dropped.
pub const PRUNE_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeList {
    pub n: usize,
    pub edges: Vec<Edge>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Fraction of the n(n-1) possible directed pairs that carry an edge.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.edges.len() as f64 / (self.n * (self.n - 1)) as f64
    }
}

/// Converts exposures to loss-given-default weights `a[i][j] / tier1[j]` and prunes
/// those below `threshold` (the boundary is kept). Exact zeros are never emitted.
pub fn normalize_edges(mat: &ExposureMatrix, tier1: &[f64], threshold: f64) -> Result<EdgeList> {
    let n = mat.n;
    if tier1.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} tier1 values for {} nodes",
            tier1.len(),
            n
        )));
    }
    if let Some((j, t)) = tier1.iter().enumerate().find(|(_, t)| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "node {j} has non-positive tier1 capital {t}"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let a = mat.get(i, j);
            if i == j || a <= 0.0 {
                continue;
            }
            let weight = a / tier1[j];
            if weight >= threshold {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    weight,
                });
            }
        }
    }
    Ok(EdgeList { n, edges })
}

/// Scales every edge weight by the stress multiplier; topology is untouched.
pub fn condition_edges(edges: &EdgeList, m: f64) -> EdgeList {
    EdgeList {
        n: edges.n,
        edges: edges
            .edges
            .iter()
            .map(|e| Edge {
                weight: e.weight * m,
                ..*e
            })
            .collect(),
    }
}

/// Reassigns the existing weights to source-target pairs drawn uniformly without
/// replacement from all non-self pairs. Output is sorted by (src, dst).
pub fn permute_edges(edges: &EdgeList, seed: u64) -> Result<EdgeList> {
    let n = edges.n;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "edge permutation needs at least 2 nodes".into(),
        ));
    }
    let slots = n * (n - 1);
    if edges.len() > slots {
        return Err(Error::InvalidArgument(format!(
            "{} edges exceed the {} available directed pairs",
            edges.len(),
            slots
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, slots, edges.len());
    let mut out: Vec<Edge> = picks
        .iter()
        .zip(&edges.edges)
        .map(|(k, e)| {
            let src = k / (n - 1);
            let r = k % (n - 1);
            let dst = if r < src { r } else { r + 1 };
            Edge {
                src,
                dst,
                weight: e.weight,
            }
        })
        .collect();
    out.sort_by_key(|e| (e.src, e.dst));
    Ok(EdgeList { n, edges: out })
}

/// Weights of the 7 -> 4 -> 1 tanh MLP that maps macro state to a stress multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMlp {
    /// 7 x 4
    pub w1: Tensor,
    /// 1 x 4
    pub b1: Tensor,
    /// 4 x 1
    pub w2: Tensor,
    /// 1 x 1
    pub b2: Tensor,
}

pub const MACRO_HIDDEN: usize = 4;

impl MacroMlp {
    pub fn zeros() -> Self {
        Self {
            w1: Tensor::zeros(NUM_MACRO, MACRO_HIDDEN),
            b1: Tensor::zeros(1, MACRO_HIDDEN),
            w2: Tensor::zeros(MACRO_HIDDEN, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// `sigmoid(w2 . tanh(z W1 + b1) + b2)`, strictly inside (0, 1) for finite inputs.
pub fn macro_multiplier(z: &[f64; NUM_MACRO], mlp: &MacroMlp) -> f64 {
    let mut out = mlp.b2.data()[0];
    for h in 0..MACRO_HIDDEN {
        let mut pre = mlp.b1.data()[h];
        for (k, zk) in z.iter().enumerate() {
            pre += zk * mlp.w1.get(k, h);
        }
        out += pre.tanh() * mlp.w2.get(h, 0);
    }
    1.0 / (1.0 + (-out).exp())
}

/// Tape version of [`macro_multiplier`]; `z` is a 1 x 7 row and the result is 1 x 1.
pub fn macro_multiplier_on_tape(
    tape: &mut Tape,
    z: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = tape.matmul(z, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2)?;
    let o = tape.add(o, b2)?;
    Ok(tape.sigmoid(o))
}

/// Appends one quarter of edges as `quarter,src_cert,dst_cert,weight` rows, writing
/// the header when the file is new or empty.
pub fn write_edges<C: std::fmt::Display>(
    path: &Path,
    quarter: QuarterTag,
    certs: &[C],
    edges: &EdgeList,
) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "quarter,src_cert,dst_cert,weight")?;
    }
    for e in &edges.edges {
        writeln!(
            w,
            "{},{},{},{}",
            quarter, certs[e.src], certs[e.dst], e.weight
        )?;
    }
    w.flush()?;
    Ok(())
}
