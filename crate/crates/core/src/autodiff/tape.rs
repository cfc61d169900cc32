use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<Self> {
        if a == b {
            Ok(Bcast::Same)
        } else if b == [1, 1] {
            Ok(Bcast::Scalar)
        } else if b == [1, a[1]] {
            Ok(Bcast::Row)
        } else if b == [a[0], 1] {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(
                op,
                format!("cannot broadcast {}x{} onto {}x{}", b[0], b[1], a[0], a[1]),
            ))
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

/// Key for the counter-based dropout mask generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub layer: u64,
}

impl DropoutKey {
    fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.epoch.to_le_bytes());
        seed[16..24].copy_from_slice(&self.step.to_le_bytes());
        seed[24..].copy_from_slice(&self.layer.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Keep-mask scaled by `1 / (1 - p)`.
    pub fn mask(self, len: usize, p: f64) -> Vec<f64> {
        let mut rng = self.rng();
        let scale = 1.0 / (1.0 - p);
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect()
    }
}

/// Running statistics and hyper-parameters of one batch-normalisation layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var, f64),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Dropout(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    RepeatCols(Var, usize),
    GroupSumCols(Var, usize),
    EdgeSoftmax {
        fd: Var,
        fs: Var,
        w: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
        /// Pre-activation logits `fd[dst] + fs[src]`, E x H.
        raw: Vec<f64>,
        slope: f64,
    },
    EdgeAggregate {
        alpha: Var,
        x: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation tape.
///
/// Every op appends a node; nodes are in topological order by construction, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn unary_map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    t.map(f)
}

fn elu(v: f64, alpha: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        alpha * (v.exp() - 1.0)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), false, self.value(b), false, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let bc = Bcast::resolve(name, sa, self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let cols = sa[1];
        let mut out = Vec::with_capacity(av.len());
        for i in 0..sa[0] {
            for j in 0..cols {
                out.push(f(av[i * cols + j], bv[bc.index(i, j, cols)]));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(sa[0], cols, out)?, mk(a, b, bc), rg))
    }

    /// Elementwise `a + b`; `b` may be a row, column or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = unary_map(self.value(x), |v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = unary_map(self.value(x), f);
        let rg = self.rg(&[x]);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, |v| elu(v, alpha), Op::Elu(x, alpha))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax along `axis` (1: each row sums to one, 0: each column sums to one).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::shape("softmax", format!("axis {axis} out of range")));
        }
        let t = self.value(x);
        let [r, c] = t.shape();
        let mut out = t.data().to_vec();
        let (outer, inner, stride_o, stride_i) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        for o in 0..outer {
            let base = o * stride_o;
            let mut max = f64::NEG_INFINITY;
            for i in 0..inner {
                max = max.max(out[base + i * stride_i]);
            }
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (out[base + i * stride_i] - max).exp();
                out[base + i * stride_i] = e;
                sum += e;
            }
            for i in 0..inner {
                out[base + i * stride_i] /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(r, c, out)?, Op::Softmax(x, axis), rg))
    }

    /// Concatenate along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.shape(p)).collect();
        let value = match axis {
            0 => {
                let c = shapes[0][1];
                if let Some(s) = shapes.iter().find(|s| s[1] != c) {
                    return Err(Error::shape(
                        "concat",
                        format!("axis 0: column counts {c} and {}", s[1]),
                    ));
                }
                let rows: usize = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(rows * c);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, c, data)?
            }
            1 => {
                let r = shapes[0][0];
                if let Some(s) = shapes.iter().find(|s| s[0] != r) {
                    return Err(Error::shape(
                        "concat",
                        format!("axis 1: row counts {r} and {}", s[0]),
                    ));
                }
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(r, cols, data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(Error::shape("slice", format!("axis {axis} out of range"))),
        };
        if start + len > extent {
            return Err(Error::shape(
                "slice",
                format!(
                    "range {start}..{} exceeds extent {extent} of {r}x{c}",
                    start + len
                ),
            ));
        }
        let t = self.value(x);
        let value = if axis == 0 {
            Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row_slice(i)[start..start + len]);
            }
            Tensor::new(r, len, data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    fn reduce(t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        let [r, c] = t.shape();
        match axis {
            None => Ok(Tensor::scalar(t.sum())),
            Some(0) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                        *o += v;
                    }
                }
                Tensor::new(1, c, out)
            }
            Some(1) => Tensor::new(r, 1, (0..r).map(|i| t.row_slice(i).iter().sum()).collect()),
            Some(a) => Err(Error::shape("sum", format!("axis {a} out of range"))),
        }
    }

    /// Sum over all elements (`None`) or along an axis.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let v = Self::reduce(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Sum(x, axis), rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let [r, c] = self.shape(x);
        let count = match axis {
            None => r * c,
            Some(0) => r,
            Some(_) => c,
        };
        if count == 0 {
            return Err(Error::shape(
                "mean",
                format!("empty reduction over {r}x{c}"),
            ));
        }
        let v = Self::reduce(self.value(x), axis)?.map(|s| s / count as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Mean(x, axis), rg))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout p={p} outside [0,1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let mask = key.mask(t.len(), p);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    /// Batch normalisation over rows (each column is a feature).
    ///
    /// Training mode normalises with the batch mean and biased variance and updates
    /// the running statistics; evaluation mode uses the running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<Var> {
        let [n, f] = self.shape(x);
        if self.shape(gamma) != [1, f] || self.shape(beta) != [1, f] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "input {n}x{f} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if state.running_mean.len() != f {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "running stats for {} features, input has {f}",
                    state.running_mean.len()
                ),
            ));
        }
        if train && n < 2 {
            return Err(Error::shape(
                "batchnorm",
                "training batch needs at least 2 rows",
            ));
        }
        let xv = self.value(x);
        let (mean, inv_std) = if train {
            let mut mean = vec![0.0; f];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(xv.row_slice(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; f];
            for i in 0..n {
                for ((s, v), m) in var.iter_mut().zip(xv.row_slice(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let unbiased = n as f64 / (n as f64 - 1.0);
            for j in 0..f {
                state.running_mean[j] =
                    (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
                state.running_var[j] = (1.0 - state.momentum) * state.running_var[j]
                    + state.momentum * var[j] * unbiased;
            }
            let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s + state.eps).sqrt()).collect();
            (mean, inv)
        } else {
            let inv = state
                .running_var
                .iter()
                .map(|s| 1.0 / (s + state.eps).sqrt())
                .collect();
            (state.running_mean.clone(), inv)
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * f);
        let mut out = Vec::with_capacity(n * f);
        for i in 0..n {
            for (j, v) in xv.row_slice(i).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(n, f, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(n, f, xhat)?,
                inv_std,
                batch_stats: train,
            },
            rg,
        ))
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = t.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} >= {r} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(idx.len(), c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Output has `rows` rows; row `idx[k]` accumulates row `k` of `x`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = t.shape();
        if idx.len() != r {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("index {bad} >= {rows} output rows"),
            ));
        }
        let mut data = vec![0.0; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(t.row_slice(k)) {
                *o += v;
            }
        }
        let value = Tensor::new(rows, c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScatterAddRows(x, idx.to_vec()), rg))
    }

    /// Each column repeated `times` times in place: `[a, b] -> [a, a, b, b]` for `times = 2`.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let [r, c] = t.shape();
        let mut data = Vec::with_capacity(r * c * times);
        for v in t.data() {
            data.extend(std::iter::repeat(*v).take(times));
        }
        let value = Tensor::new(r, c * times, data).expect("repeat_cols shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::RepeatCols(x, times), rg)
    }

    /// Sums consecutive groups of `group` columns: `r x (k*group) -> r x k`.
    pub fn group_sum_cols(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = t.shape();
        if group == 0 || c % group != 0 {
            return Err(Error::shape(
                "group_sum_cols",
                format!("{c} columns not divisible into groups of {group}"),
            ));
        }
        let data = t.data().chunks(group).map(|ch| ch.iter().sum()).collect();
        let value = Tensor::new(r, c / group, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GroupSumCols(x, group), rg))
    }

    /// Weighted attention over the in-edges of each destination, per head.
    ///
    /// `fd`, `fs` are n x H per-node score halves and `w` is E x 1 of positive edge
    /// weights. With `s = leaky_relu(fd[dst] + fs[src])` the output is
    /// `alpha[e, h] = w[e] exp(s[e, h]) / sum of w exp(s) over edges sharing dst[e]`.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_softmax(
        &mut self,
        fd: Var,
        fs: Var,
        w: Var,
        src: &[usize],
        dst: &[usize],
        slope: f64,
    ) -> Result<Var> {
        let (fdv, fsv, wv) = (self.value(fd), self.value(fs), self.value(w));
        let [n, h] = fdv.shape();
        let e = src.len();
        if fsv.shape() != [n, h] || wv.shape() != [e, 1] || dst.len() != e {
            return Err(Error::shape(
                "edge_softmax",
                format!(
                    "scores {n}x{h} and {:?}, weights {:?}, {e} sources, {} destinations",
                    fsv.shape(),
                    wv.shape(),
                    dst.len()
                ),
            ));
        }
        if src.iter().chain(dst).any(|&i| i >= n) {
            return Err(Error::shape(
                "edge_softmax",
                "edge endpoint out of range".to_string(),
            ));
        }
        if let Some(bad) = wv.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "edge_softmax weight {bad} is not positive"
            )));
        }
        let mut raw = vec![0.0; e * h];
        let mut logit = vec![0.0; e * h];
        let mut shift = vec![f64::NEG_INFINITY; n * h];
        for k in 0..e {
            let (rd, rs) = (fdv.row_slice(dst[k]), fsv.row_slice(src[k]));
            let lw = wv.data()[k].ln();
            for j in 0..h {
                let r = rd[j] + rs[j];
                raw[k * h + j] = r;
                let l = if r > 0.0 { r } else { slope * r } + lw;
                logit[k * h + j] = l;
                let m = &mut shift[dst[k] * h + j];
                if l > *m {
                    *m = l;
                }
            }
        }
        let mut denom = vec![0.0; n * h];
        for k in 0..e {
            for j in 0..h {
                let v = (logit[k * h + j] - shift[dst[k] * h + j]).exp();
                logit[k * h + j] = v;
                denom[dst[k] * h + j] += v;
            }
        }
        for k in 0..e {
            for j in 0..h {
                logit[k * h + j] /= denom[dst[k] * h + j];
            }
        }
        let value = Tensor::new(e, h, logit)?;
        let rg = self.rg(&[fd, fs, w]);
        Ok(self.push(
            value,
            Op::EdgeSoftmax {
                fd,
                fs,
                w,
                src: src.to_vec(),
                dst: dst.to_vec(),
                raw,
                slope,
            },
            rg,
        ))
    }

    /// Attention-weighted message passing without materializing per-edge messages.
    ///
    /// `alpha` is E x H, `x` is n x (H*D); output row `dst[e]` accumulates
    /// `alpha[e, h] * x[src[e], h*D..(h+1)*D]` for every head `h`.
    pub fn edge_aggregate(
        &mut self,
        alpha: Var,
        x: Var,
        src: &[usize],
        dst: &[usize],
        rows: usize,
    ) -> Result<Var> {
        let (a, xv) = (self.value(alpha), self.value(x));
        let [e, h] = a.shape();
        let [n, c] = xv.shape();
        if src.len() != e || dst.len() != e {
            return Err(Error::shape(
                "edge_aggregate",
                format!(
                    "{e} attention rows for {} sources, {} destinations",
                    src.len(),
                    dst.len()
                ),
            ));
        }
        if h == 0 || c % h != 0 {
            return Err(Error::shape(
                "edge_aggregate",
                format!("{c} columns for {h} heads"),
            ));
        }
        if src.iter().any(|&i| i >= n) || dst.iter().any(|&i| i >= rows) {
            return Err(Error::shape(
                "edge_aggregate",
                "edge endpoint out of range".to_string(),
            ));
        }
        let d = c / h;
        let mut data = vec![0.0; rows * c];
        for k in 0..e {
            let (xs, ar) = (xv.row_slice(src[k]), a.row_slice(k));
            let o = &mut data[dst[k] * c..(dst[k] + 1) * c];
            for (head, &w) in ar.iter().enumerate() {
                for j in head * d..(head + 1) * d {
                    o[j] += w * xs[j];
                }
            }
        }
        let value = Tensor::new(rows, c, data)?;
        let rg = self.rg(&[alpha, x]);
        Ok(self.push(
            value,
            Op::EdgeAggregate {
                alpha,
                x,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            let [r, c] = self.shape(loss);
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {r}x{c}"),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_bcast(
        g: &Tensor,
        bc: Bcast,
        b_shape: [usize; 2],
        f: impl Fn(usize, f64) -> f64,
    ) -> Tensor {
        let [r, c] = g.shape();
        let mut out = Tensor::zeros(b_shape[0], b_shape[1]);
        let od = out.data_mut();
        for i in 0..r {
            for j in 0..c {
                let k = i * c + j;
                od[bc.index(i, j, c)] += f(k, g.data()[k]);
            }
        }
        out
    }

    /// `g * f(input)` for an elementwise op with local derivative `f`.
    fn elementwise_grad(&self, x: Var, g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x).data();
        let data = g
            .data()
            .iter()
            .zip(xv)
            .map(|(gv, xv)| gv * f(*xv))
            .collect();
        Tensor::new(g.rows(), g.cols(), data).expect("grad shape")
    }

    fn output_grad(&self, out: &Tensor, g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data = g
            .data()
            .iter()
            .zip(out.data())
            .map(|(gv, y)| gv * f(*y))
            .collect();
        Tensor::new(g.rows(), g.cols(), data).expect("grad shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut d = vec![0.0; av.len()];
                    gemm_acc(g, false, bv, true, &mut d);
                    self.accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), d).unwrap());
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; bv.len()];
                    gemm_acc(av, true, g, false, &mut d);
                    self.accumulate(grads, *b, Tensor::new(bv.rows(), bv.cols(), d).unwrap());
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let gb = Self::reduce_bcast(g, *bc, self.shape(*b), |_, v| sign * v);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = g.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= bv[bc.index(k / c, k % c, c)];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = Self::reduce_bcast(g, *bc, self.shape(*b), |k, v| v * av[k]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b, bc) => {
                let bv = self.value(*b).data();
                let c = g.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v /= bv[bc.index(k / c, k % c, c)];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let od = out.data();
                    let gb = Self::reduce_bcast(g, *bc, self.shape(*b), |k, v| {
                        -v * od[k] / bv[bc.index(k / c, k % c, c)]
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Affine(x, s) => {
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                let d = self.output_grad(out, g, |y| y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = self.output_grad(out, g, |y| 1.0 - y * y);
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = self.elementwise_grad(*x, g, |v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Elu(x, alpha) => {
                let a = *alpha;
                let d = self.elementwise_grad(*x, g, |v| if v > 0.0 { 1.0 } else { a * v.exp() });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let d = self.elementwise_grad(*x, g, |v| if v > 0.0 { 1.0 } else { s });
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = self.output_grad(out, g, |y| y);
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = self.elementwise_grad(*x, g, |v| 1.0 / v);
                self.accumulate(grads, *x, d);
            }
            Op::Powf(x, p) => {
                let p = *p;
                let d = self.elementwise_grad(*x, g, |v| p * v.powf(p - 1.0));
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = self.elementwise_grad(*x, g, |v| if v < lo || v > hi { 0.0 } else { 1.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x, axis) => {
                let [r, c] = out.shape();
                let y = out.data();
                let gd = g.data();
                let mut d = vec![0.0; r * c];
                let (outer, inner, so, si) = if *axis == 1 {
                    (r, c, c, 1)
                } else {
                    (c, r, 1, c)
                };
                for o in 0..outer {
                    let base = o * so;
                    let dot: f64 = (0..inner)
                        .map(|i| gd[base + i * si] * y[base + i * si])
                        .sum();
                    for i in 0..inner {
                        let k = base + i * si;
                        d[k] = y[k] * (gd[k] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(r, c, d).unwrap());
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    if self.wants(p) {
                        let gp = if *axis == 0 {
                            let c = g.cols();
                            Tensor::new(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec())
                                .unwrap()
                        } else {
                            let mut data = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                data.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                            }
                            Tensor::new(pr, pc, data).unwrap()
                        };
                        self.accumulate(grads, p, gp);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let [r, c] = self.shape(*x);
                let mut d = Tensor::zeros(r, c);
                if *axis == 0 {
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for i in 0..r {
                        d.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(g.row_slice(i));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let [r, c] = self.shape(*x);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / match axis {
                        None => r * c,
                        Some(0) => r,
                        Some(_) => c,
                    } as f64
                } else {
                    1.0
                };
                let mut d = Tensor::zeros(r, c);
                let gd = g.data();
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            None => gd[0],
                            Some(0) => gd[j],
                            Some(_) => gd[i],
                        };
                        d.data_mut()[i * c + j] = gv * scale;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, f] = g.shape();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let xh = xhat.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        dbeta[j] += gd[i * f + j];
                        dgamma[j] += gd[i * f + j] * xh[i * f + j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * f];
                    if *batch_stats {
                        let nf = n as f64;
                        for j in 0..f {
                            let k = gam[j] * inv_std[j] / nf;
                            for i in 0..n {
                                let idx = i * f + j;
                                dx[idx] = k * (nf * gd[idx] - dbeta[j] - xh[idx] * dgamma[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..f {
                                dx[i * f + j] = gd[i * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(n, f, dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(1, f, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(1, f, dbeta).unwrap());
            }
            Op::GatherRows(x, idx) => {
                let [r, c] = self.shape(*x);
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d.data_mut()[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(k))
                    {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ScatterAddRows(x, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, Tensor::new(idx.len(), c, data).unwrap());
            }
            Op::RepeatCols(x, times) => {
                let [r, c] = self.shape(*x);
                let data = g.data().chunks(*times).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(r, c, data).unwrap());
            }
            Op::GroupSumCols(x, group) => {
                let [r, c] = self.shape(*x);
                let mut data = Vec::with_capacity(r * c);
                for v in g.data() {
                    data.extend(std::iter::repeat(*v).take(*group));
                }
                self.accumulate(grads, *x, Tensor::new(r, c, data).unwrap());
            }
            Op::EdgeSoftmax {
                fd,
                fs,
                w,
                src,
                dst,
                raw,
                slope,
            } => {
                let [e, h] = out.shape();
                let n = self.shape(*fd)[0];
                let (a, gd) = (out.data(), g.data());
                let mut dot = vec![0.0; n * h];
                for k in 0..e {
                    for j in 0..h {
                        dot[dst[k] * h + j] += a[k * h + j] * gd[k * h + j];
                    }
                }
                // ds = alpha (g - dot); dw sums ds / w over heads.
                let mut ds = vec![0.0; e * h];
                for k in 0..e {
                    for j in 0..h {
                        ds[k * h + j] = a[k * h + j] * (gd[k * h + j] - dot[dst[k] * h + j]);
                    }
                }
                if self.wants(*w) {
                    let wv = self.value(*w).data();
                    let dw = (0..e)
                        .map(|k| ds[k * h..(k + 1) * h].iter().sum::<f64>() / wv[k])
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(e, 1, dw).unwrap());
                }
                for (v, r) in ds.iter_mut().zip(raw) {
                    if *r <= 0.0 {
                        *v *= slope;
                    }
                }
                for (var, ends) in [(*fd, dst), (*fs, src)] {
                    if self.wants(var) {
                        let mut d = vec![0.0; n * h];
                        for (k, &i) in ends.iter().enumerate() {
                            for j in 0..h {
                                d[i * h + j] += ds[k * h + j];
                            }
                        }
                        self.accumulate(grads, var, Tensor::new(n, h, d).unwrap());
                    }
                }
            }
            Op::EdgeAggregate { alpha, x, src, dst } => {
                let (av, xv) = (self.value(*alpha), self.value(*x));
                let [e, h] = av.shape();
                let c = xv.cols();
                let d = c / h;
                if self.wants(*alpha) {
                    let mut da = vec![0.0; e * h];
                    for k in 0..e {
                        let (xs, gr) = (xv.row_slice(src[k]), g.row_slice(dst[k]));
                        for head in 0..h {
                            let r = head * d..(head + 1) * d;
                            da[k * h + head] =
                                xs[r.clone()].iter().zip(&gr[r]).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *alpha, Tensor::new(e, h, da).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for k in 0..e {
                        let (ar, gr) = (av.row_slice(k), g.row_slice(dst[k]));
                        let o = &mut dx[src[k] * c..(src[k] + 1) * c];
                        for (head, &w) in ar.iter().enumerate() {
                            for j in head * d..(head + 1) * d {
                                o[j] += w * gr[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.rows(), c, dx).unwrap());
                }
            }
        }
    }
}
