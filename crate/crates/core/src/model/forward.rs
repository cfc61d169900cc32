use std::collections::{BTreeMap, HashMap};

use super::{Ablation, Dataset, GraphSnapshot, ModelDims};
use crate::autodiff::{BatchNormState, DropoutKey, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::netrecon::{macro_multiplier_on_tape, EdgeList};
use crate::panel::NUM_MACRO;

const ATTN_SLOPE: f64 = 0.2;
const PROB_FLOOR: f64 = 1e-7;

/// Parameters of a [`ParamStore`] registered on a tape.
pub struct Binding {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Binding {
    /// Registers every parameter as a leaf; `trainable` controls gradient tracking.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        let mut index = HashMap::with_capacity(store.len());
        for (k, (name, t)) in store.iter().enumerate() {
            vars.push(tape.leaf(t.clone(), trainable));
            index.insert(name.to_string(), k);
        }
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&k| self.vars[k])
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.get(name)
            .ok_or_else(|| Error::Invariant(format!("parameter `{name}` missing from model")))
    }

    /// Leaf handles in parameter-store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Edge list in gather/scatter form. Self loops come first (node `i` is entry `i`),
/// followed by the graph edges; messages flow from `src` to `dst`.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// E x 1 LGD weights, zero on self loops.
    pub weight: Tensor,
    /// E x 1 indicator of self loops.
    pub self_loop: Tensor,
}

impl EdgeIndex {
    pub fn new(edges: &EdgeList) -> Self {
        let n = edges.n;
        let e = n + edges.len();
        let mut src: Vec<usize> = (0..n).collect();
        let mut dst: Vec<usize> = (0..n).collect();
        let mut weight = vec![0.0; n];
        let mut self_loop = vec![1.0; n];
        for ed in &edges.edges {
            src.push(ed.src);
            dst.push(ed.dst);
            weight.push(ed.weight);
            self_loop.push(0.0);
        }
        Self {
            n,
            src,
            dst,
            weight: Tensor::new(e, 1, weight).expect("shape"),
            self_loop: Tensor::new(e, 1, self_loop).expect("shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

pub struct GatOutput {
    /// n x (heads * head_dim)
    pub out: Var,
    /// E x heads attention after weight modulation; rows of one destination sum to 1.
    pub alpha: Var,
}

/// One multi-head graph attention layer.
///
/// Per head: `s = leaky_relu(a_dst . W x_i + a_src . W x_j)` for each edge `j -> i`,
/// `alpha_ij = w_ij exp(s_ij) / sum_k w_ik exp(s_ik)` over the in-edges of `i` (self
/// loop weight 1), output `elu(sum_j alpha_ij W x_j)`. Heads are concatenated.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer(
    tape: &mut Tape,
    x: Var,
    idx: &EdgeIndex,
    edge_w: Var,
    w: Var,
    a_dst: Var,
    a_src: Var,
    heads: usize,
    head_dim: usize,
) -> Result<GatOutput> {
    let n = idx.n;
    if tape.value(x).rows() != n {
        return Err(Error::shape(
            "gat_layer",
            format!("{} feature rows for {n} nodes", tape.value(x).rows()),
        ));
    }
    if tape.value(w).cols() != heads * head_dim {
        return Err(Error::shape(
            "gat_layer",
            format!(
                "weight has {} columns, expected {heads}x{head_dim}",
                tape.value(w).cols()
            ),
        ));
    }
    let wx = tape.matmul(x, w)?;
    let fd = tape.mul(wx, a_dst)?;
    let fd = tape.group_sum_cols(fd, head_dim)?;
    let fs = tape.mul(wx, a_src)?;
    let fs = tape.group_sum_cols(fs, head_dim)?;
    let alpha = tape.edge_softmax(fd, fs, edge_w, &idx.src, &idx.dst, ATTN_SLOPE)?;
    let agg = tape.edge_aggregate(alpha, wx, &idx.src, &idx.dst, n)?;
    Ok(GatOutput {
        out: tape.elu(agg, 1.0),
        alpha,
    })
}

pub struct SpatialOutput {
    /// n x spatial_dim node embeddings.
    pub h: Var,
    /// Attention of both layers, E x heads each.
    pub alpha: [Var; 2],
    /// Macro stress multiplier (1 x 1) when the macro path is active.
    pub multiplier: Option<Var>,
}

/// Two stacked attention layers over one quarter's graph.
pub fn spatial_encode(
    tape: &mut Tape,
    bind: &Binding,
    snap: &GraphSnapshot,
    idx: &EdgeIndex,
    dims: &ModelDims,
    ablation: Ablation,
) -> Result<SpatialOutput> {
    let (edge_w, multiplier) = if ablation.uses_macro() {
        let z = tape.constant(Tensor::row(&snap.z));
        let m = macro_multiplier_on_tape(
            tape,
            z,
            bind.var("macro.w1")?,
            bind.var("macro.b1")?,
            bind.var("macro.w2")?,
            bind.var("macro.b2")?,
        )?;
        let base = tape.constant(idx.weight.clone());
        let ones = tape.constant(idx.self_loop.clone());
        let scaled = tape.mul(base, m)?;
        (tape.add(scaled, ones)?, Some(m))
    } else {
        let mut w = idx.weight.clone();
        w.add_assign(&idx.self_loop);
        (tape.constant(w), None)
    };
    let x = tape.constant(snap.x.clone());
    let l1 = gat_layer(
        tape,
        x,
        idx,
        edge_w,
        bind.var("gat1.w")?,
        bind.var("gat1.a_dst")?,
        bind.var("gat1.a_src")?,
        dims.heads,
        dims.head_dim,
    )?;
    let l2 = gat_layer(
        tape,
        l1.out,
        idx,
        edge_w,
        bind.var("gat2.w")?,
        bind.var("gat2.a_dst")?,
        bind.var("gat2.a_src")?,
        dims.heads,
        dims.head_dim,
    )?;
    Ok(SpatialOutput {
        h: l2.out,
        alpha: [l1.alpha, l2.alpha],
        multiplier,
    })
}

/// One LSTM direction over `xs`; returns the hidden state at every position.
fn lstm_pass(
    tape: &mut Tape,
    xs: &[Var],
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    let mut out: Vec<Option<Var>> = vec![None; xs.len()];
    let mut state: Option<(Var, Var)> = None;
    for t in order {
        let mut g = tape.matmul(xs[t], wx)?;
        if let Some((h, _)) = state {
            let gh = tape.matmul(h, wh)?;
            g = tape.add(g, gh)?;
        }
        let g = tape.add(g, b)?;
        let i = tape.slice(g, 1, 0, hidden)?;
        let i = tape.sigmoid(i);
        let cand = tape.slice(g, 1, 2 * hidden, hidden)?;
        let cand = tape.tanh(cand);
        let o = tape.slice(g, 1, 3 * hidden, hidden)?;
        let o = tape.sigmoid(o);
        let mut c = tape.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let f = tape.slice(g, 1, hidden, hidden)?;
            let f = tape.sigmoid(f);
            let keep = tape.mul(f, c_prev)?;
            c = tape.add(keep, c)?;
        }
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        out[t] = Some(h);
        state = Some((h, c));
    }
    Ok(out
        .into_iter()
        .map(|v| v.expect("every position visited"))
        .collect())
}

pub struct TemporalOutput {
    /// m x temporal_dim context vectors.
    pub c: Var,
    /// m x L attention over history positions, oldest first.
    pub beta: Option<Var>,
}

/// Stacked bidirectional LSTM over a history of per-quarter embeddings (oldest
/// first, each m x d), followed by additive attention over positions, or the last
/// state when attention is ablated.
pub fn temporal_encode(
    tape: &mut Tape,
    bind: &Binding,
    xs: &[Var],
    dims: &ModelDims,
    ablation: Ablation,
) -> Result<TemporalOutput> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "temporal_encode on an empty sequence".into(),
        ));
    }
    let mut seq = xs.to_vec();
    for layer in 0..dims.lstm_layers {
        let mut dirs = Vec::with_capacity(2);
        for (dir, reverse) in [("fwd", false), ("bwd", true)] {
            let p = format!("lstm.l{layer}.{dir}");
            dirs.push(lstm_pass(
                tape,
                &seq,
                bind.var(&format!("{p}.wx"))?,
                bind.var(&format!("{p}.wh"))?,
                bind.var(&format!("{p}.b"))?,
                dims.lstm_hidden,
                reverse,
            )?);
        }
        seq = dirs[0]
            .iter()
            .zip(&dirs[1])
            .map(|(&f, &b)| tape.concat(&[f, b], 1))
            .collect::<Result<_>>()?;
    }
    if !ablation.uses_temporal_attention() {
        return Ok(TemporalOutput {
            c: *seq.last().expect("non-empty"),
            beta: None,
        });
    }
    let (wa, ba, v) = (
        bind.var("tattn.w")?,
        bind.var("tattn.b")?,
        bind.var("tattn.v")?,
    );
    let mut scores = Vec::with_capacity(seq.len());
    for &s in &seq {
        let u = tape.matmul(s, wa)?;
        let u = tape.add(u, ba)?;
        let u = tape.tanh(u);
        scores.push(tape.matmul(u, v)?);
    }
    let e = tape.concat(&scores, 1)?;
    let beta = tape.softmax(e, 1)?;
    let mut c: Option<Var> = None;
    for (tau, &s) in seq.iter().enumerate() {
        let b = tape.slice(beta, 1, tau, 1)?;
        let term = tape.mul(s, b)?;
        c = Some(match c {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(TemporalOutput {
        c: c.expect("non-empty"),
        beta: Some(beta),
    })
}

/// `sigmoid(W2 dropout(elu(bn(W1 [c | x | z]))) + b2)`, one row per node.
#[allow(clippy::too_many_arguments)]
pub fn risk_head(
    tape: &mut Tape,
    bind: &Binding,
    c: Var,
    x: Var,
    z: &[f64; NUM_MACRO],
    bn: &mut BatchNormState,
    train: bool,
    dropout: f64,
    key: DropoutKey,
) -> Result<Var> {
    let n = tape.value(c).rows();
    let zrep = Tensor::new(
        n,
        NUM_MACRO,
        z.iter().copied().cycle().take(n * NUM_MACRO).collect(),
    )?;
    let zrep = tape.constant(zrep);
    let inp = tape.concat(&[c, x, zrep], 1)?;
    let h = tape.matmul(inp, bind.var("head.w1")?)?;
    let h = tape.batchnorm(
        h,
        bind.var("head.bn_gamma")?,
        bind.var("head.bn_beta")?,
        bn,
        train,
    )?;
    let h = tape.elu(h, 1.0);
    let h = tape.dropout(h, dropout, train, key)?;
    let o = tape.matmul(h, bind.var("head.w2")?)?;
    let o = tape.add(o, bind.var("head.b2")?)?;
    Ok(tape.sigmoid(o))
}

/// Mean focal loss `-a_t (1 - p_t)^gamma ln p_t` over the rows of `r` (n x 1), with
/// predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(tape: &mut Tape, r: Var, y: &[bool], gamma: f64, alpha: f64) -> Result<Var> {
    let n = tape.value(r).rows();
    if tape.value(r).cols() != 1 || y.len() != n {
        return Err(Error::shape(
            "focal_loss",
            format!(
                "{:?} predictions for {} labels",
                tape.value(r).shape(),
                y.len()
            ),
        ));
    }
    let rc = tape.clamp(r, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let col =
        |f: &dyn Fn(bool) -> f64| Tensor::column(&y.iter().map(|&l| f(l)).collect::<Vec<_>>());
    let sign = tape.constant(col(&|l| if l { 1.0 } else { -1.0 }));
    let offset = tape.constant(col(&|l| if l { 0.0 } else { 1.0 }));
    let neg_alpha = tape.constant(col(&|l| if l { -alpha } else { alpha - 1.0 }));
    let pt = tape.mul(rc, sign)?;
    let pt = tape.add(pt, offset)?;
    let q = tape.affine(pt, -1.0, 1.0);
    let modulating = tape.powf(q, gamma);
    let logp = tape.log(pt);
    let term = tape.mul(modulating, logp)?;
    let term = tape.mul(term, neg_alpha)?;
    tape.mean(term, None)
}

/// Plain-value focal loss, same definition as [`focal_loss`].
pub fn focal_loss_value(r: &[f64], y: &[bool], gamma: f64, alpha: f64) -> f64 {
    let total: f64 = r
        .iter()
        .zip(y)
        .map(|(&p, &l)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let (pt, at) = if l {
                (p, alpha)
            } else {
                (1.0 - p, 1.0 - alpha)
            };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    total / r.len() as f64
}

/// Forward pass for the nodes of one target quarter.
pub struct QuarterForward {
    /// n x 1 risk scores in snapshot row order.
    pub r: Var,
    /// Temporal attention per node, oldest history quarter first.
    pub beta: Vec<Option<Vec<f64>>>,
    pub history_len: Vec<usize>,
}

/// Scores quarter `t` given the spatial embeddings of every quarter its histories
/// touch (`spatial[tau]`).
#[allow(clippy::too_many_arguments)]
pub fn score_quarter(
    tape: &mut Tape,
    bind: &Binding,
    data: &Dataset,
    spatial: &[Option<Var>],
    t: usize,
    dims: &ModelDims,
    ablation: Ablation,
    window: usize,
    bn: &mut BatchNormState,
    train: bool,
    dropout: f64,
    key: DropoutKey,
) -> Result<QuarterForward> {
    let snap = &data.snapshots[t];
    let n = snap.n();
    let h_of = |tau: usize| -> Result<Var> {
        spatial.get(tau).copied().flatten().ok_or_else(|| {
            Error::Invariant(format!("spatial embedding for quarter {tau} not computed"))
        })
    };
    let (c, beta, history_len) = if ablation.uses_lstm() {
        let histories: Vec<Vec<usize>> = (0..n).map(|i| data.history(t, i, window)).collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, h) in histories.iter().enumerate() {
            groups.entry(h.len()).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(n);
        let mut beta = vec![None; n];
        for (&len, nodes) in &groups {
            let mut xs = Vec::with_capacity(len);
            for p in 0..len {
                let tau = t + 1 + p - len;
                let rows: Vec<usize> = nodes.iter().map(|&i| histories[i][p]).collect();
                xs.push(tape.gather_rows(h_of(tau)?, &rows)?);
            }
            let out = temporal_encode(tape, bind, &xs, dims, ablation)?;
            if let Some(b) = out.beta {
                let bv = tape.value(b);
                for (k, &i) in nodes.iter().enumerate() {
                    beta[i] = Some(bv.row_slice(k).to_vec());
                }
            }
            parts.push(out.c);
            order.extend_from_slice(nodes);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        };
        let mut inverse = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k;
        }
        let identity = inverse.iter().enumerate().all(|(k, &i)| k == i);
        let c = if identity {
            stacked
        } else {
            tape.gather_rows(stacked, &inverse)?
        };
        (c, beta, histories.iter().map(Vec::len).collect())
    } else {
        (h_of(t)?, vec![None; n], vec![1; n])
    };
    let x = tape.constant(snap.x.clone());
    let r = risk_head(tape, bind, c, x, &snap.z, bn, train, dropout, key)?;
    Ok(QuarterForward {
        r,
        beta,
        history_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, GraphSnapshot};
    use crate::netrecon::Edge;
    use crate::panel::{QuarterTag, NUM_FEATURES};

    fn elu(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            v.exp() - 1.0
        }
    }

    fn lrelu(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            0.2 * v
        }
    }

    fn line_graph() -> EdgeList {
        // 0 -> 1 -> 2
        EdgeList {
            n: 3,
            edges: vec![
                Edge {
                    src: 0,
                    dst: 1,
                    weight: 0.5,
                },
                Edge {
                    src: 1,
                    dst: 2,
                    weight: 0.25,
                },
            ],
        }
    }

    #[test]
    fn line_graph_matches_hand_computation() {
        // One head, one output dim: W x is a scalar per node.
        let xs = [1.0, -2.0, 0.5];
        let (wv, ad, asrc) = (0.8, 0.3, -0.6);
        let mut tape = Tape::new();
        let idx = EdgeIndex::new(&line_graph());
        let mut w = idx.weight.clone();
        w.add_assign(&idx.self_loop);
        let ew = tape.constant(w);
        let x = tape.constant(Tensor::column(&xs));
        let wvar = tape.constant(Tensor::scalar(wv));
        let adv = tape.constant(Tensor::scalar(ad));
        let asv = tape.constant(Tensor::scalar(asrc));
        let out = gat_layer(&mut tape, x, &idx, ew, wvar, adv, asv, 1, 1).unwrap();
        let got = tape.value(out.out).data().to_vec();

        let wx: Vec<f64> = xs.iter().map(|v| v * wv).collect();
        let score = |i: usize, j: usize| lrelu(ad * wx[i] + asrc * wx[j]);
        // Node 0: self only.
        let o0 = elu(wx[0]);
        // Node 1: self (weight 1) and 0 -> 1 (weight 0.5).
        let (a, b) = (score(1, 1).exp(), 0.5 * score(1, 0).exp());
        let o1 = elu((a * wx[1] + b * wx[0]) / (a + b));
        let (a, b) = (score(2, 2).exp(), 0.25 * score(2, 1).exp());
        let o2 = elu((a * wx[2] + b * wx[1]) / (a + b));
        for (g, e) in got.iter().zip([o0, o1, o2]) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let mut tape = Tape::new();
        let idx = EdgeIndex::new(&EdgeList {
            n: 2,
            edges: vec![],
        });
        let ew = tape.constant(idx.self_loop.clone());
        let x = tape.constant(Tensor::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let w = tape
            .constant(Tensor::new(2, 4, vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8]).unwrap());
        let a = tape.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let out = gat_layer(&mut tape, x, &idx, ew, w, a, a, 2, 2).unwrap();
        let xv = tape.value(x).clone();
        let wv = tape.value(w).clone();
        for i in 0..2 {
            for c in 0..4 {
                let lin: f64 = (0..2).map(|k| xv.get(i, k) * wv.get(k, c)).sum();
                assert!((tape.value(out.out).get(i, c) - elu(lin)).abs() < 1e-14);
            }
        }
        assert!(tape.value(out.alpha).data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn equal_scores_and_weights_give_uniform_attention() {
        // All features zero -> all raw scores zero; all weights 1.
        let edges = EdgeList {
            n: 3,
            edges: vec![
                Edge {
                    src: 0,
                    dst: 2,
                    weight: 1.0,
                },
                Edge {
                    src: 1,
                    dst: 2,
                    weight: 1.0,
                },
            ],
        };
        let idx = EdgeIndex::new(&edges);
        let mut tape = Tape::new();
        let mut w = idx.weight.clone();
        w.add_assign(&idx.self_loop);
        let ew = tape.constant(w);
        let x = tape.constant(Tensor::zeros(3, 2));
        let wv = tape.constant(Tensor::ones(2, 2));
        let a = tape.constant(Tensor::ones(1, 2));
        let out = gat_layer(&mut tape, x, &idx, ew, wv, a, a, 1, 2).unwrap();
        let alpha = tape.value(out.alpha);
        for e in 0..idx.len() {
            if idx.dst[e] == 2 {
                assert!((alpha.get(e, 0) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_step_history_gives_unit_beta() {
        let dims = ModelDims {
            heads: 2,
            head_dim: 2,
            lstm_hidden: 3,
            attn_dim: 3,
            head_hidden: 4,
            lstm_layers: 2,
        };
        let ps = init_params(&dims, Ablation::Full, 5).unwrap();
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, false);
        let x = tape
            .constant(Tensor::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, 0.0, 0.5, 0.9]).unwrap());
        let out = temporal_encode(&mut tape, &bind, &[x], &dims, Ablation::Full).unwrap();
        let beta = tape.value(out.beta.unwrap());
        assert_eq!(beta.data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_states_give_uniform_beta() {
        let dims = ModelDims {
            heads: 1,
            head_dim: 2,
            lstm_hidden: 2,
            attn_dim: 2,
            head_hidden: 2,
            lstm_layers: 1,
        };
        let mut ps = init_params(&dims, Ablation::Full, 5).unwrap();
        // Zero LSTM weights make every hidden state identical.
        for name in [
            "lstm.l0.fwd.wx",
            "lstm.l0.fwd.wh",
            "lstm.l0.bwd.wx",
            "lstm.l0.bwd.wh",
        ] {
            let k = ps.position(name).unwrap();
            ps.tensor_mut(k)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, false);
        let xs: Vec<Var> = (0..4)
            .map(|k| tape.constant(Tensor::full(3, 2, k as f64)))
            .collect();
        let out = temporal_encode(&mut tape, &bind, &xs, &dims, Ablation::Full).unwrap();
        for v in tape.value(out.beta.unwrap()).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(temporal_encode(&mut tape, &bind, &[], &dims, Ablation::Full).is_err());
    }

    #[test]
    fn zero_head_gives_half() {
        let dims = ModelDims {
            heads: 1,
            head_dim: 2,
            lstm_hidden: 2,
            attn_dim: 2,
            head_hidden: 3,
            lstm_layers: 1,
        };
        let mut ps = init_params(&dims, Ablation::NoTemporal, 1).unwrap();
        for name in ["head.w1", "head.w2"] {
            let k = ps.position(name).unwrap();
            ps.tensor_mut(k)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, false);
        let c = tape.constant(Tensor::full(4, 2, 3.0));
        let x = tape.constant(Tensor::full(4, NUM_FEATURES, -1.0));
        let mut bn = BatchNormState::new(3);
        let key = DropoutKey {
            seed: 0,
            epoch: 0,
            step: 0,
            layer: 0,
        };
        let r = risk_head(
            &mut tape,
            &bind,
            c,
            x,
            &[1.0; NUM_MACRO],
            &mut bn,
            false,
            0.3,
            key,
        )
        .unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn focal_examples() {
        let v = focal_loss_value(&[0.9], &[true], 2.0, 0.25);
        let oracle = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::column(&[0.9, 0.2]));
        let l = focal_loss(&mut tape, r, &[true, false], 2.0, 0.25).unwrap();
        let direct = focal_loss_value(&[0.9, 0.2], &[true, false], 2.0, 0.25);
        assert!((tape.value(l).item() - direct).abs() < 1e-16);
        assert!(focal_loss_value(&[1.0 - 1e-12, 1e-12], &[true, false], 2.0, 0.25) < 1e-20);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let r = [0.1f64, 0.5, 0.77, 0.999];
        let y = [true, false, true, false];
        let bce: f64 = r
            .iter()
            .zip(&y)
            .map(|(&p, &l)| if l { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        assert!((focal_loss_value(&r, &y, 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn spatial_attention_rows_sum_to_one() {
        let dims = ModelDims {
            heads: 2,
            head_dim: 3,
            ..ModelDims::default()
        };
        let ps = init_params(&dims, Ablation::Full, 9).unwrap();
        let n = 6;
        let x = Tensor::new(
            n,
            NUM_FEATURES,
            (0..n * NUM_FEATURES)
                .map(|k| ((k * 7) % 11) as f64 / 5.0 - 1.0)
                .collect(),
        )
        .unwrap();
        let edges = EdgeList {
            n,
            edges: vec![
                Edge {
                    src: 0,
                    dst: 1,
                    weight: 0.3,
                },
                Edge {
                    src: 2,
                    dst: 1,
                    weight: 0.01,
                },
                Edge {
                    src: 3,
                    dst: 1,
                    weight: 2.0,
                },
                Edge {
                    src: 5,
                    dst: 4,
                    weight: 0.002,
                },
            ],
        };
        let snap = GraphSnapshot {
            quarter: QuarterTag::new(2020, 1).unwrap(),
            certs: (0..n).map(|i| i.to_string()).collect(),
            x,
            edges,
            z_raw: [0.5; NUM_MACRO],
            z: [0.5; NUM_MACRO],
            labels: vec![false; n],
        };
        let idx = EdgeIndex::new(&snap.edges);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, false);
        let out = spatial_encode(&mut tape, &bind, &snap, &idx, &dims, Ablation::Full).unwrap();
        for a in out.alpha {
            let a = tape.value(a);
            let mut sums = vec![0.0; n * 2];
            for e in 0..idx.len() {
                for k in 0..2 {
                    sums[idx.dst[e] * 2 + k] += a.get(e, k);
                }
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-10));
        }
        let m = tape.value(out.multiplier.unwrap()).item();
        assert!(m > 0.0 && m < 1.0);
    }
}
