//! Building blocks: dense and residual blocks, the GloNet aggregation layer,
//! dimension adapters and output heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, Graph, Mode, NodeId, RunningStats};
use crate::error::{Error, Result};
use crate::optim::he_normal_init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Everything a block needs to run forward on a graph.
///
/// Batch-norm layers read their running statistics from `buffers` and, in
/// train mode, push the refreshed statistics onto `bn_updates`. The caller
/// decides whether to commit them.
pub struct ForwardCtx<'a> {
    pub params: &'a ParamStore,
    pub buffers: &'a [RunningStats],
    pub mode: Mode,
    pub bn_updates: Vec<(usize, RunningStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a [RunningStats], mode: Mode) -> Self {
        Self {
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }
}

fn check_width(op: &'static str, g: &Graph, x: NodeId, expected: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != expected {
        return Err(Error::dim(op, s, &[s.first().copied().unwrap_or(0), expected]));
    }
    Ok(())
}

/// Affine map `x·W + b`, optionally preceded by a ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub preactivation: bool,
}

impl DenseBlock {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        preactivation: bool,
        rng: &mut R,
    ) -> Self {
        let w = he_normal_init(&[d_in, d_out], d_in, rng);
        Self::with_weight(store, name, w, preactivation)
    }

    /// Uses `weight` as given (shape `d_in×d_out`) with a zero bias.
    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor, preactivation: bool) -> Self {
        let (d_in, d_out) = (weight.rows(), weight.cols());
        let weight = store.add(format!("{name}.weight"), weight, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Self {
            weight,
            bias,
            d_in,
            d_out,
            preactivation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward(&self, g: &mut Graph, ctx: &ForwardCtx, x: NodeId) -> Result<NodeId> {
        check_width("dense", g, x, self.d_in)?;
        let h = if self.preactivation { g.relu(x)? } else { x };
        self.affine(g, ctx, h)
    }

    /// `x·W` without bias or activation.
    pub fn linear(&self, g: &mut Graph, ctx: &ForwardCtx, x: NodeId) -> Result<NodeId> {
        check_width("dense", g, x, self.d_in)?;
        let w = g.param(self.weight.0, ctx.params.tensor(self.weight));
        g.matmul(x, w)
    }

    fn affine(&self, g: &mut Graph, ctx: &ForwardCtx, x: NodeId) -> Result<NodeId> {
        let xw = self.linear(g, ctx, x)?;
        let b = g.param(self.bias.0, ctx.params.tensor(self.bias));
        g.add_bias(xw, b)
    }
}

/// Batch normalization with trainable scale/shift and a running-stat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
    pub width: usize,
    pub cfg: BnConfig,
}

impl BatchNorm {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Vec<RunningStats>,
        name: &str,
        width: usize,
        cfg: BnConfig,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]), false);
        buffers.push(RunningStats::new(width));
        Self {
            gamma,
            beta,
            buffer: buffers.len() - 1,
            width,
            cfg,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.width
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma.0, ctx.params.tensor(self.gamma));
        let beta = g.param(self.beta.0, ctx.params.tensor(self.beta));
        let mut stats = ctx.buffers[self.buffer].clone();
        let y = g.batchnorm(x, gamma, beta, &mut stats, self.cfg, ctx.mode)?;
        if ctx.mode == Mode::Train {
            ctx.bn_updates.push((self.buffer, stats));
        }
        Ok(y)
    }
}

/// `affine ∘ ReLU ∘ BN?`, the simple block shared by the vanilla and GloNet
/// families and used twice inside a residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleBlock {
    pub bn: Option<BatchNorm>,
    pub dense: DenseBlock,
}

impl SimpleBlock {
    pub fn param_count(&self) -> usize {
        self.dense.param_count() + self.bn.as_ref().map_or(0, BatchNorm::param_count)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        check_width("block", g, x, self.dense.d_in)?;
        let h = match &self.bn {
            Some(bn) => bn.forward(g, ctx, x)?,
            None => x,
        };
        self.dense.forward(g, ctx, h)
    }
}

/// `Id + F` with `F` two stacked simple blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub units: [SimpleBlock; 2],
}

impl ResidualBlock {
    pub fn param_count(&self) -> usize {
        self.units.iter().map(SimpleBlock::param_count).sum()
    }

    /// The residual branch `F(x)` alone.
    pub fn residual(&self, g: &mut Graph, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let h = self.units[0].forward(g, ctx, x)?;
        self.units[1].forward(g, ctx, h)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let f = self.residual(g, ctx, x)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Simple(SimpleBlock),
    Residual(ResidualBlock),
}

impl Block {
    pub fn param_count(&self) -> usize {
        match self {
            Block::Simple(b) => b.param_count(),
            Block::Residual(b) => b.param_count(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Block::Simple(b) => b.dense.d_out,
            Block::Residual(b) => b.units[1].dense.d_out,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        match self {
            Block::Simple(b) => b.bn.is_some(),
            Block::Residual(b) => b.units.iter().any(|u| u.bn.is_some()),
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, Block::Residual(_))
    }

    /// Applies the block: `x_{l+1} = G_l(x_l)`.
    pub fn apply(&self, g: &mut Graph, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Simple(b) => b.forward(g, ctx, x),
            Block::Residual(b) => b.forward(g, ctx, x),
        }
    }
}

/// Maps one block output to the common aggregation width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    Identity,
    ZeroPad { target: usize },
    Project(DenseBlock),
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Project(d) => d.param_count(),
            _ => 0,
        }
    }
}

/// Zero-pad embedding or trainable projection of `x[batch×d]` to width `target`.
pub fn adapt_dimension(
    g: &mut Graph,
    ctx: &ForwardCtx,
    x: NodeId,
    adapter: &Adapter,
) -> Result<NodeId> {
    match adapter {
        Adapter::Identity => Ok(x),
        Adapter::ZeroPad { target } => g.pad_columns(x, *target),
        Adapter::Project(dense) => {
            check_width("project", g, x, dense.d_in)
                .map_err(|e| Error::Adapter(e.to_string()))?;
            dense.forward(g, ctx, x)
        }
    }
}

/// Parameter-free (for identity/zero-pad adapters) sum of every block output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GloNetLayer {
    pub adapters: Vec<Adapter>,
    pub width: usize,
}

impl GloNetLayer {
    pub fn identity(blocks: usize, width: usize) -> Self {
        Self {
            adapters: vec![Adapter::Identity; blocks],
            width,
        }
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(Adapter::param_count).sum()
    }

    /// Adapted summand of block `index`.
    pub fn adapted(
        &self,
        g: &mut Graph,
        ctx: &ForwardCtx,
        index: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let adapter = self.adapters.get(index).ok_or_else(|| {
            Error::Adapter(format!(
                "no adapter for block {index} ({} configured)",
                self.adapters.len()
            ))
        })?;
        let y = adapt_dimension(g, ctx, x, adapter)?;
        if g.shape(y)[1] != self.width {
            return Err(Error::dim("glonet_aggregate", g.shape(y), &[self.width]));
        }
        Ok(y)
    }

    /// `Σ_l adapt_l(x_l)`, summed left to right over `outputs`.
    pub fn aggregate(&self, g: &mut Graph, ctx: &ForwardCtx, outputs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = outputs.first() else {
            return Err(Error::Usage("glonet_aggregate needs at least one block output".into()));
        };
        if outputs.len() > self.adapters.len() {
            return Err(Error::Adapter(format!(
                "{} outputs but only {} adapters",
                outputs.len(),
                self.adapters.len()
            )));
        }
        let mut acc = self.adapted(g, ctx, 0, first)?;
        for (i, &x) in outputs.iter().enumerate().skip(1) {
            let y = self.adapted(g, ctx, i, x)?;
            acc = g.add(acc, y)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    Regression,
    Classification { classes: usize },
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::Classification { classes } => *classes,
        }
    }
}

/// Linear read-out, followed by softmax for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub dense: DenseBlock,
}

/// Pre- and post-activation head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: NodeId,
    pub output: NodeId,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: HeadKind, d_in: usize, rng: &mut R) -> Self {
        let dense = DenseBlock::new(store, "head", d_in, kind.out_dim(), false, rng);
        Self { kind, dense }
    }

    pub fn param_count(&self) -> usize {
        self.dense.param_count()
    }

    pub fn apply(&self, g: &mut Graph, ctx: &ForwardCtx, x: NodeId) -> Result<HeadOutput> {
        let logits = self.dense.forward(g, ctx, x)?;
        let output = match self.kind {
            HeadKind::Regression => logits,
            HeadKind::Classification { .. } => g.softmax(logits)?,
        };
        Ok(HeadOutput { logits, output })
    }
}
