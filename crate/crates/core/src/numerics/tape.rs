//! Define-by-run operation tape with reverse-mode gradients.
//!
//! Every forward op appends a node holding its value and, when the tape is
//! recording, the context its backward rule needs. Inputs always precede
//! outputs, so a single reverse sweep over the node list visits each node at
//! most once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::{canonical_sum, matmul_into, Array};
use super::params::Params;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
        }
    }
}

/// Backward rule for an op implemented outside this module.
///
/// `backward` receives the input values, the op's output value and the
/// upstream gradient, and returns one optional gradient per input (same
/// order, same shapes).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

enum Op {
    Input,
    Param(String),
    Detached,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        order: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the running statistics by whoever owns the parameters.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    stat_updates: Vec<StatUpdate>,
    counters: BTreeMap<&'static str, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    /// A tape that records backward context.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            stat_updates: Vec::new(),
            counters: BTreeMap::new(),
        }
    }

    /// A tape that only evaluates values.
    pub fn detached() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn record_stat_update(&mut self, prefix: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.stat_updates.push(StatUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
    }

    pub fn bump(&mut self, counter: &'static str) {
        *self.counters.entry(counter).or_default() += 1;
    }

    pub fn counter(&self, counter: &str) -> usize {
        self.counters.get(counter).copied().unwrap_or(0)
    }

    fn push(&mut self, value: Array, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let op = if self.recording { op } else { Op::Detached };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, params: &Params, name: &str) -> Result<Var> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        self.push(value, Op::Param(name.to_string()), "param")
    }

    fn expect_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let a = self.value(v);
        if !a.is_matrix() {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", a.shape())));
        }
        Ok((a.rows(), a.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.expect_matrix(a, "matmul")?;
        let (k2, m) = self.expect_matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        self.push(Array::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.expect_matrix(x, "add_bias")?;
        let bias = self.value(b);
        if bias.len() != m {
            return Err(Error::dim("add_bias", format!("bias length {} vs {m} columns", bias.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * m..(r + 1) * m].iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        self.push(Array::matrix(n, m, out)?, Op::AddBias(x, b), "add_bias")
    }

    /// Row-wise affine map `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Array::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Array::from_vec(v.shape(), v.data().iter().map(|a| a * s).collect())?;
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x);
        let out = Array::from_vec(v.shape(), v.data().iter().map(|a| kind.apply(*a)).collect())?;
        self.push(out, Op::Act(x, kind), "activation")
    }

    /// Per-column normalization with batch statistics (biased variance).
    /// Returns the output together with the batch mean and unbiased variance
    /// for running-statistic bookkeeping.
    ///
    /// Column sums are accumulated in sorted order so the statistics do not
    /// depend on row order.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.expect_matrix(x, "batchnorm")?;
        self.check_affine(gamma, beta, c)?;
        if n == 0 {
            let y = self.push(Array::zeros(&[0, c]), Op::Detached, "batchnorm")?;
            return Ok((y, vec![0.0; c], vec![1.0; c]));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut col = vec![0.0; n];
        for j in 0..c {
            for i in 0..n {
                col[i] = xv[i * c + j];
            }
            mean[j] = canonical_sum(&mut col.clone()) / n as f64;
            for v in col.iter_mut() {
                *v = (*v - mean[j]) * (*v - mean[j]);
            }
            var[j] = canonical_sum(&mut col) / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbiased: Vec<f64> = if n > 1 {
            var.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).collect()
        } else {
            var.clone()
        };
        let y = self.normalize(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((y, mean, unbiased))
    }

    /// Per-column normalization with fixed statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (_, c) = self.expect_matrix(x, "batchnorm")?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batchnorm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm", format!("scale/shift length vs {c} columns")));
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let xa = self.value(x);
        let (n, c) = (xa.rows(), xa.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xa.data()[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            batch_stats,
        };
        self.push(Array::matrix(n, c, out)?, op, "batchnorm")
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xa = self.value(x);
        let (n, c) = (xa.rows(), xa.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &r in index {
            if r >= n {
                return Err(Error::dim("gather_rows", format!("row {r} out of {n}")));
            }
            out.extend_from_slice(xa.row(r));
        }
        let out = Array::matrix(index.len(), c, out)?;
        self.push(out, Op::GatherRows { x, index: index.to_vec() }, "gather_rows")
    }

    /// `out[order[p]] = x[p]`; `order` must be a permutation of the rows.
    pub fn scatter_rows(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let xa = self.value(x);
        let (n, c) = (xa.rows(), xa.cols());
        if order.len() != n {
            return Err(Error::contract(format!(
                "scatter of {n} rows through a permutation of length {}",
                order.len()
            )));
        }
        let mut out = vec![0.0; n * c];
        let mut seen = vec![false; n];
        for (p, &r) in order.iter().enumerate() {
            if r >= n || seen[r] {
                return Err(Error::contract("scatter order is not a permutation"));
            }
            seen[r] = true;
            out[r * c..(r + 1) * c].copy_from_slice(xa.row(p));
        }
        let out = Array::matrix(n, c, out)?;
        self.push(out, Op::ScatterRows { x, order: order.to_vec() }, "scatter_rows")
    }

    /// Row `j` of the output is the mean of the rows listed in `groups[j]`.
    /// Rows are summed in the listed order.
    pub fn segment_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xa = self.value(x);
        let (n, c) = (xa.rows(), xa.cols());
        let mut out = vec![0.0; groups.len() * c];
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::contract("segment_mean with an empty group"));
            }
            let o = &mut out[j * c..(j + 1) * c];
            for &r in g {
                if r >= n {
                    return Err(Error::dim("segment_mean", format!("row {r} out of {n}")));
                }
                for (ov, xv) in o.iter_mut().zip(xa.row(r)) {
                    *ov += xv;
                }
            }
            let inv = 1.0 / g.len() as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Array::matrix(groups.len(), c, out)?;
        self.push(out, Op::SegmentMean { x, groups: groups.to_vec() }, "segment_mean")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.expect_matrix(a, "concat_rows")?;
        let (nb, cb) = self.expect_matrix(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::dim("concat_rows", format!("{ca} vs {cb} columns")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(Array::matrix(na + nb, ca, out)?, Op::ConcatRows(a, b), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.expect_matrix(x, "slice_rows")?;
        if start > end || end > n {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {n}")));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        self.push(Array::matrix(end - start, c, out)?, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.expect_matrix(x, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c}")));
        }
        let xa = self.value(x);
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&xa.row(r)[start..end]);
        }
        self.push(Array::matrix(n, end - start, out)?, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x), "sum")
    }

    /// `Σ x ⊙ weights` with constant weights of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xa = self.value(x);
        if xa.len() != weights.len() {
            return Err(Error::dim("weighted_sum", format!("{} vs {}", xa.len(), weights.len())));
        }
        let s = xa.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        self.push(Array::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, "weighted_sum")
    }

    /// Mean binary cross-entropy of logits `x` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xa = self.value(x);
        if xa.len() != targets.len() || targets.is_empty() {
            return Err(Error::dim("bce_with_logits", format!("{} logits vs {} targets", xa.len(), targets.len())));
        }
        let total: f64 = xa
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        self.push(Array::scalar(loss), Op::BceWithLogits { x, targets: targets.to_vec() }, "bce_with_logits")
    }

    /// Appends an externally computed value whose gradient is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Array, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, name)
    }

    /// Reverse sweep from a scalar root. Gradients for parameters in
    /// `params` that the root does not reach are zero.
    pub fn backward(&self, root: Var, params: &Params) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::contract("backward on a detached tape"));
        }
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(self.value(root).shape(), 1.0));
        let mut by_param: BTreeMap<String, Array> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &mut by_param);
            grads[i] = Some(g);
        }

        for (name, value) in params.trainable() {
            by_param
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(value.shape()));
        }
        Ok(Gradients { nodes: grads, params: by_param })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Array,
        grads: &mut [Option<Array>],
        by_param: &mut BTreeMap<String, Array>,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Detached => {}
            Op::Param(name) => match by_param.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    by_param.insert(name.clone(), g.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let ga = slot(grads, *a, av.shape());
                for r in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += gd[r * m + j] * bv.data()[p * m + j];
                        }
                        ga[r * k + p] += s;
                    }
                }
                let gb = slot(grads, *b, bv.shape());
                for r in 0..n {
                    for p in 0..k {
                        let a_rp = av.data()[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            gb[p * m + j] += a_rp * gd[r * m + j];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let m = out.cols();
                add_into(slot(grads, *x, out.shape()), gd);
                let gb = slot(grads, *b, self.value(*b).shape());
                for row in gd.chunks(m.max(1)) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, out.shape()), gd);
                add_into(slot(grads, *b, out.shape()), gd);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, out.shape());
                for ((acc, gv), bv) in ga.iter_mut().zip(gd).zip(bv) {
                    *acc += gv * bv;
                }
                let gb = slot(grads, *b, out.shape());
                for ((acc, gv), av) in gb.iter_mut().zip(gd).zip(av) {
                    *acc += gv * av;
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, out.shape());
                for (acc, gv) in gx.iter_mut().zip(gd) {
                    *acc += gv * s;
                }
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, out.shape());
                for (((acc, gv), xv), yv) in gx.iter_mut().zip(gd).zip(xv).zip(out.data()) {
                    *acc += gv * kind.derivative(*xv, *yv);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += gd[r * c + j];
                        sum_gx[j] += gd[r * c + j] * xhat[r * c + j];
                    }
                }
                add_into(slot(grads, *gamma, &[c]), &sum_gx);
                add_into(slot(grads, *beta, &[c]), &sum_g);
                let gx = slot(grads, *x, out.shape());
                let nf = n as f64;
                for r in 0..n {
                    for j in 0..c {
                        let k = r * c + j;
                        gx[k] += if *batch_stats {
                            gam[j] * inv_std[j] / nf * (nf * gd[k] - sum_g[j] - xhat[k] * sum_gx[j])
                        } else {
                            gam[j] * inv_std[j] * gd[k]
                        };
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let xs = self.value(*x).shape().to_vec();
                let c = out.cols();
                let gx = slot(grads, *x, &xs);
                for (i, &r) in index.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &gd[i * c..(i + 1) * c]);
                }
            }
            Op::ScatterRows { x, order } => {
                let c = out.cols();
                let gx = slot(grads, *x, out.shape());
                for (p, &r) in order.iter().enumerate() {
                    add_into(&mut gx[p * c..(p + 1) * c], &gd[r * c..(r + 1) * c]);
                }
            }
            Op::SegmentMean { x, groups } => {
                let xs = self.value(*x).shape().to_vec();
                let c = out.cols();
                let gx = slot(grads, *x, &xs);
                for (j, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for (acc, gv) in gx[r * c..(r + 1) * c].iter_mut().zip(&gd[j * c..(j + 1) * c]) {
                            *acc += gv * inv;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                add_into(slot(grads, *a, &sa), &gd[..split]);
                add_into(slot(grads, *b, &sb), &gd[split..]);
            }
            Op::SliceRows { x, start } => {
                let xs = self.value(*x).shape().to_vec();
                let c = out.cols();
                let gx = slot(grads, *x, &xs);
                add_into(&mut gx[start * c..start * c + gd.len()], gd);
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, w) = (out.rows(), out.cols());
                let c = xs[1];
                let gx = slot(grads, *x, &xs);
                for r in 0..n {
                    add_into(&mut gx[r * c + start..r * c + start + w], &gd[r * w..(r + 1) * w]);
                }
            }
            Op::Sum(x) => {
                let xs = self.value(*x).shape().to_vec();
                let g0 = gd[0];
                slot(grads, *x, &xs).iter_mut().for_each(|a| *a += g0);
            }
            Op::WeightedSum { x, weights } => {
                let xs = self.value(*x).shape().to_vec();
                let g0 = gd[0];
                for (acc, w) in slot(grads, *x, &xs).iter_mut().zip(weights) {
                    *acc += g0 * w;
                }
            }
            Op::BceWithLogits { x, targets } => {
                let xa = self.value(*x);
                let xs = xa.shape().to_vec();
                let scale = gd[0] / targets.len() as f64;
                let zs = xa.data().to_vec();
                for ((acc, z), y) in slot(grads, *x, &xs).iter_mut().zip(zs).zip(targets) {
                    *acc += scale * (sigmoid(z) - y);
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Array> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&vals, out, g);
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        let shape = self.value(*v).shape().to_vec();
                        add_into(slot(grads, *v, &shape), ig.data());
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Array>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Array::zeros(shape)).data_mut()
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Array>>,
    params: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Array> {
        self.params
    }

    /// Gradient with respect to any node, `None` when unreached.
    pub fn node(&self, v: Var) -> Option<&Array> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_examples() {
        let mut t = Tape::new();
        let x = t.input(Array::from_rows(&[&[1.0, 2.0]])).unwrap();
        let w = t.input(Array::identity(2)).unwrap();
        let b = t.input(Array::vector(vec![0.0, 0.0])).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let x = t.input(Array::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let w = t.input(Array::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]])).unwrap();
        let b = t.input(Array::vector(vec![1.0, 1.0])).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0, 1.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut t = Tape::new();
        let x = t.input(Array::zeros(&[2, 3])).unwrap();
        let w = t.input(Array::zeros(&[2, 3])).unwrap();
        assert!(matches!(t.matmul(x, w), Err(Error::Dimension { .. })));
        let w = t.input(Array::zeros(&[3, 4])).unwrap();
        let b = t.input(Array::zeros(&[3])).unwrap();
        assert!(matches!(t.linear(x, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_abs_diff_eq!(Activation::Softplus.apply(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(Activation::Softplus.apply(800.0), 800.0, epsilon = 1e-12);
        assert!(Activation::Softplus.apply(-800.0) >= 0.0);
        assert_abs_diff_eq!(Activation::Sigmoid.apply(-800.0), 0.0, epsilon = 1e-300);
    }

    #[test]
    fn relu_subgradient() {
        let mut t = Tape::new();
        let x = t.input(Array::vector(vec![-1.0, 2.0])).unwrap();
        let y = t.activation(x, Activation::Relu).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s, &Params::default()).unwrap();
        assert_eq!(g.node(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // root = sum(x·W) with x constant: dW[p][j] = Σ_r x[r][p]
        let mut params = Params::default();
        params.insert("w", Array::from_rows(&[&[0.5, -1.0], &[2.0, 0.25], &[1.0, 1.0]])).unwrap();
        let mut t = Tape::new();
        let x = t.input(Array::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let w = t.param(&params, "w").unwrap();
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s, &params).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let x = t.input(Array::zeros(&[2, 2])).unwrap();
        assert!(matches!(t.backward(x, &Params::default()), Err(Error::Contract(_))));
        let mut d = Tape::detached();
        let x = d.input(Array::scalar(1.0)).unwrap();
        assert!(d.backward(x, &Params::default()).is_err());
    }

    #[test]
    fn unreached_params_get_zero() {
        let mut params = Params::default();
        params.insert("used", Array::vector(vec![1.0, 2.0])).unwrap();
        params.insert("unused", Array::zeros(&[3, 2])).unwrap();
        let mut t = Tape::new();
        let u = t.param(&params, "used").unwrap();
        let s = t.sum(u).unwrap();
        let g = t.backward(s, &params).unwrap();
        assert_eq!(g.param("unused").unwrap(), &Array::zeros(&[3, 2]));
        assert_eq!(g.param("used").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.input(Array::vector(vec![1000.0])).unwrap();
        assert!(matches!(t.activation(x, Activation::Exp), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batchnorm_examples() {
        let mut params = Params::default();
        params.insert("g", Array::vector(vec![1.0])).unwrap();
        params.insert("b", Array::vector(vec![0.0])).unwrap();
        let mut t = Tape::new();
        let g = t.param(&params, "g").unwrap();
        let b = t.param(&params, "b").unwrap();
        let x = t.input(Array::from_rows(&[&[3.0], &[3.0], &[3.0]])).unwrap();
        let (y, _, _) = t.batchnorm_train(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let x = t.input(Array::from_rows(&[&[0.0], &[2.0]])).unwrap();
        let (y, mean, var) = t.batchnorm_train(x, g, b).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(t.value(y).data()[1], 1.0, epsilon = 1e-5);
        assert_eq!(mean, vec![1.0]);
        assert_eq!(var, vec![2.0]);
    }

    #[test]
    fn detached_matches_attached() {
        let run = |t: &mut Tape| {
            let x = t.input(Array::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]])).unwrap();
            let w = t.input(Array::from_rows(&[&[1.5, -0.5], &[0.2, 0.9]])).unwrap();
            let y = t.matmul(x, w).unwrap();
            let y = t.activation(y, Activation::Silu).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(&mut Tape::new()), run(&mut Tape::detached()));
    }
}
