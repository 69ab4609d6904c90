//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward sweep,
//! so node inputs always precede the node itself and a single reverse walk over
//! the node list is a valid topological order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for mode-dependent operations (batch normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Hyperparameters of a batch-normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight of the old running statistic in the exponential moving average.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.99,
        }
    }
}

/// Running mean/variance tracked by a batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    PadColumns(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized input, rows × cols.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Mse {
        pred: NodeId,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param_key: Option<usize>,
}

/// The tape: an append-only list of recorded operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Enables or disables the per-op NaN/Inf scan (on by default).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Leaf tensor; keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push_node(Op::Leaf, t, rg, None)
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push_node(Op::Leaf, t, false, None)
    }

    /// Trainable parameter identified by `key`; its value is copied onto the tape.
    pub fn param(&mut self, key: usize, t: &Tensor) -> NodeId {
        let mut v = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        v.set_requires_grad(true);
        self.push_node(Op::Leaf, v, true, Some(key))
    }

    /// `(key, gradient)` for every parameter leaf that has received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param_key?, n.value.grad()?)))
    }

    fn push_node(
        &mut self,
        op: Op,
        value: Tensor,
        requires_grad: bool,
        param_key: Option<usize>,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param_key,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        if self.check_finite {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericFault(format!(
                    "{name} produced {} at flat index {pos}",
                    data[pos]
                )));
            }
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(op, Tensor::from_parts(shape, data), rg, None))
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_op("matmul", Op::MatMul(a, b), vec![m, n], out, &[a, b])
    }

    /// Adds a bias vector `[d]` to every row of `x[batch×d]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("add_bias", x)?;
        if self.value(bias).len() != cols {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (v, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push_op("add_bias", Op::AddBias(x, bias), shape, out, &[x, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op("add", Op::Add(a, b), shape, out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op("mul", Op::Mul(a, b), shape, out, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale", Op::Scale(a, c), shape, out, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("relu", Op::Relu(a), shape, out, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push_op("sum", Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push_op("mean", Op::Mean(a), vec![1], vec![s], &[a])
    }

    /// Row-wise softmax of `x[batch×c]`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("softmax", x)?;
        let out = softmax_rows(self.value(x).data(), rows, cols);
        self.push_op("softmax", Op::Softmax(x), vec![rows, cols], out, &[x])
    }

    /// Appends zero columns so that `x[batch×d]` becomes `batch×target`.
    pub fn pad_columns(&mut self, x: NodeId, target: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("pad_columns", x)?;
        if cols > target {
            return Err(Error::Adapter(format!(
                "cannot zero-pad width {cols} down to {target}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * target];
        for r in 0..rows {
            out[r * target..r * target + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        self.push_op("pad_columns", Op::PadColumns(x), vec![rows, target], out, &[x])
    }

    /// Batch normalization over the rows of `x[batch×d]`.
    ///
    /// In train mode the batch statistics normalize the input and are folded
    /// into `stats`; in eval mode `stats` is used as is.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats,
        cfg: BnConfig,
        mode: Mode,
    ) -> Result<NodeId> {
        if !(cfg.eps > 0.0) {
            return Err(Error::Config(format!(
                "batchnorm eps must be positive, got {}",
                cfg.eps
            )));
        }
        let (rows, cols) = self.matrix_dims("batchnorm", x)?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim("batchnorm", self.shape(x), self.shape(gamma)));
        }
        if stats.mean.len() != cols || stats.var.len() != cols {
            return Err(Error::dim("batchnorm", self.shape(x), &[stats.mean.len()]));
        }
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let mut mean = vec![0.0; cols];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = xv[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        if mode == Mode::Train {
            let m = cfg.momentum;
            for c in 0..cols {
                stats.mean[c] = m * stats.mean[c] + (1.0 - m) * mean[c];
                stats.var[c] = m * stats.var[c] + (1.0 - m) * var[c];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        self.push_op("batchnorm", op, vec![rows, cols], out, &[x, gamma, beta])
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mse_loss", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        self.push_op("mse_loss", op, vec![1], vec![loss], &[pred])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// evaluated with a log-sum-exp so it stays finite for extreme logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * cols..(r + 1) * cols];
            loss += log_sum_exp(row) - row[label];
        }
        loss /= rows as f64;
        let probs = softmax_rows(z, rows, cols);
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push_op("cross_entropy", op, vec![1], vec![loss], &[logits])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added to the grad slot of every leaf that requires one,
    /// so calling `backward` twice without clearing doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their adjoint until the end of the sweep.
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(self.nodes[a.0].value.shape());
                    let n = self.nodes[b.0].value.cols();
                    if self.nodes[a.0].requires_grad {
                        let da = gemm_nt(&g, self.nodes[b.0].value.data(), m, n, k);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = gemm_tn(self.nodes[a.0].value.data(), &g, m, k, n);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::AddBias(x, bias) => {
                    let cols = self.nodes[bias.0].value.len();
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut adj, *bias, db);
                    }
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    if a == b {
                        accumulate(&mut adj, *a, g.iter().map(|v| 2.0 * v).collect());
                    } else {
                        accumulate(&mut adj, *a, g.clone());
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| v * c).collect());
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::PadColumns(x) => {
                    let (rows, cols) = dims2(self.nodes[x.0].value.shape());
                    let target = node.value.cols();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g[r * target..r * target + cols]);
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (rows, cols) = dims2(node.value.shape());
                    let gv = self.nodes[gamma.0].value.data();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; rows * cols];
                        let nf = rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                dx[i] = if *train {
                                    gv[c] * inv_std[c] / nf
                                        * (nf * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    gv[c] * inv_std[c] * g[i]
                                };
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::Mse { pred, target } => {
                    let p = self.nodes[pred.0].value.data();
                    let n = p.len() as f64;
                    let d = p
                        .iter()
                        .zip(target)
                        .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                        .collect();
                    accumulate(&mut adj, *pred, d);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let cols = self.nodes[logits.0].value.cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * cols + l] -= scale;
                    }
                    accumulate(&mut adj, *logits, d);
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (Op::Leaf, true, Some(a)) = (&node.op, node.requires_grad, a) {
                node.value.accumulate_grad(&a)?;
            }
        }
        Ok(())
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
    match adj[id.0].as_mut() {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => adj[id.0] = Some(delta),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (ov, zv) in o.iter_mut().zip(row) {
            *ov = (zv - max).exp();
            total += *ov;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}
