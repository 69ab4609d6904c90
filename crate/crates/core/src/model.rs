//! The five architecture families and their construction rules.
//!
//! Depth is always counted in GloNet-equivalent blocks. The first block of
//! every model is a plain affine map from the input to `width` units, so a
//! GloNet or vanilla model with `n` blocks has that input layer plus `n - 1`
//! simple blocks, and a residual model has the input layer plus `n / 2`
//! residual blocks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, Graph, Mode, NodeId, RunningStats};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Block, DenseBlock, ForwardCtx, GloNetLayer, Head, HeadKind, ResidualBlock, SimpleBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vanilla,
    VanillaNoBn,
    Resnetv2,
    Resnetv2NoBn,
    Glonet,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Vanilla,
        Family::VanillaNoBn,
        Family::Resnetv2,
        Family::Resnetv2NoBn,
        Family::Glonet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Vanilla => "vanilla",
            Family::VanillaNoBn => "vanilla_no_bn",
            Family::Resnetv2 => "resnetv2",
            Family::Resnetv2NoBn => "resnetv2_no_bn",
            Family::Glonet => "glonet",
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, Family::Resnetv2 | Family::Resnetv2NoBn)
    }

    pub fn uses_batchnorm(&self) -> bool {
        matches!(self, Family::Vanilla | Family::Resnetv2)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))
    }
}

fn default_width() -> usize {
    16
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub depth_blocks: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    pub input_dim: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bn: BnConfig,
}

impl ModelConfig {
    pub fn new(family: Family, depth_blocks: usize, input_dim: usize, head: HeadKind) -> Self {
        Self {
            family,
            depth_blocks,
            width: default_width(),
            input_dim,
            head,
            seed: 0,
            bn: BnConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_blocks == 0 {
            return Err(Error::Config("depth_blocks must be positive".into()));
        }
        if self.family.is_residual() && !self.depth_blocks.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depth_blocks must be even for {} (one residual block spans two simple blocks), got {}",
                self.family, self.depth_blocks
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if let HeadKind::Classification { classes } = self.head {
            if classes < 2 {
                return Err(Error::Config("classification head needs at least 2 classes".into()));
            }
        }
        if self.family.uses_batchnorm() && !(self.bn.eps > 0.0) {
            return Err(Error::Config(format!("bn.eps must be positive, got {}", self.bn.eps)));
        }
        if self.family.uses_batchnorm() && !(self.bn.momentum >= 0.0 && self.bn.momentum < 1.0) {
            return Err(Error::Config(format!(
                "bn.momentum must lie in [0, 1), got {}",
                self.bn.momentum
            )));
        }
        Ok(())
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Head output before the softmax (identical to `output` for regression).
    pub logits: NodeId,
    pub output: NodeId,
    /// `x_1 .. x_L`: the input layer output followed by every block output.
    pub block_outputs: Vec<NodeId>,
    /// Refreshed batch-norm statistics (train mode only).
    pub bn_updates: Vec<(usize, RunningStats)>,
}

/// A realized, parameterized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: Vec<RunningStats>,
    pub input_layer: DenseBlock,
    pub blocks: Vec<Block>,
    pub glonet_layer: Option<GloNetLayer>,
    pub head: Head,
}

/// Builds a model with He-normal weights and zero biases drawn from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::default();
    let mut buffers = Vec::new();
    let w = config.width;

    let input_layer = DenseBlock::new(&mut params, "input", config.input_dim, w, false, &mut rng);

    let simple = |params: &mut ParamStore, buffers: &mut Vec<RunningStats>, name: String, bn: bool, rng: &mut ChaCha8Rng| {
        let bn = bn.then(|| BatchNorm::new(params, buffers, &format!("{name}.bn"), w, config.bn));
        SimpleBlock {
            bn,
            dense: DenseBlock::new(params, &name, w, w, true, rng),
        }
    };

    let family = config.family;
    let mut blocks = Vec::new();
    if family.is_residual() {
        for i in 0..config.depth_blocks / 2 {
            let bn = family.uses_batchnorm();
            let a = simple(&mut params, &mut buffers, format!("block{}.0", i + 1), bn, &mut rng);
            let b = simple(&mut params, &mut buffers, format!("block{}.1", i + 1), bn, &mut rng);
            blocks.push(Block::Residual(ResidualBlock { units: [a, b] }));
        }
    } else {
        for i in 1..config.depth_blocks {
            let b = simple(&mut params, &mut buffers, format!("block{i}"), family.uses_batchnorm(), &mut rng);
            blocks.push(Block::Simple(b));
        }
    }

    let glonet_layer = (family == Family::Glonet).then(|| GloNetLayer::identity(config.depth_blocks, w));
    let head = Head::new(&mut params, config.head, w, &mut rng);

    Ok(Model {
        config: config.clone(),
        params,
        buffers,
        input_layer,
        blocks,
        glonet_layer,
        head,
    })
}

impl Model {
    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Number of block outputs `x_1 .. x_L` (input layer included).
    pub fn num_block_outputs(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> Result<ForwardOutput> {
        self.forward_impl(g, x, mode, self.num_block_outputs())
    }

    /// GloNet forward pass that stops after `keep` block outputs and sums only those.
    pub fn forward_truncated(&self, g: &mut Graph, x: NodeId, mode: Mode, keep: usize) -> Result<ForwardOutput> {
        if self.family() != Family::Glonet {
            return Err(Error::Usage(format!(
                "truncated evaluation needs a glonet model, got {}",
                self.family()
            )));
        }
        if keep == 0 || keep > self.num_block_outputs() {
            return Err(Error::Config(format!(
                "keep_k must lie in [1, {}], got {keep}",
                self.num_block_outputs()
            )));
        }
        self.forward_impl(g, x, mode, keep)
    }

    fn forward_impl(&self, g: &mut Graph, x: NodeId, mode: Mode, keep: usize) -> Result<ForwardOutput> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::dim("model forward", s, &[0, self.config.input_dim]));
        }
        let mut ctx = ForwardCtx::new(&self.params, &self.buffers, mode);
        let mut h = self.input_layer.forward(g, &ctx, x)?;
        let mut block_outputs = Vec::with_capacity(keep);
        block_outputs.push(h);
        for block in self.blocks.iter().take(keep - 1) {
            h = block.apply(g, &mut ctx, h)?;
            block_outputs.push(h);
        }
        let features = match &self.glonet_layer {
            Some(layer) => layer.aggregate(g, &ctx, &block_outputs)?,
            None => h,
        };
        let out = self.head.apply(g, &ctx, features)?;
        Ok(ForwardOutput {
            logits: out.logits,
            output: out.output,
            block_outputs,
            bn_updates: ctx.bn_updates,
        })
    }

    pub fn commit_bn_updates(&mut self, updates: Vec<(usize, RunningStats)>) {
        for (i, stats) in updates {
            self.buffers[i] = stats;
        }
    }

    /// Eval-mode prediction for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.forward(&mut g, xi, Mode::Eval)?;
        Ok(g.value(out.output).clone())
    }

    /// Per-block head-space contributions `adapt_l(x_l)·W_head` for a GloNet model.
    /// Their sum plus the head bias equals the model's pre-softmax output.
    pub fn block_contributions(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let Some(layer) = &self.glonet_layer else {
            return Err(Error::Usage(format!(
                "block contributions need a glonet model, got {}",
                self.family()
            )));
        };
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.forward(&mut g, xi, Mode::Eval)?;
        let ctx = ForwardCtx::new(&self.params, &self.buffers, Mode::Eval);
        let mut contributions = Vec::with_capacity(out.block_outputs.len());
        for (i, &b) in out.block_outputs.iter().enumerate() {
            let adapted = layer.adapted(&mut g, &ctx, i, b)?;
            let c = self.head.dense.linear(&mut g, &ctx, adapted)?;
            contributions.push(g.value(c).clone());
        }
        Ok(contributions)
    }

    pub fn head_bias(&self) -> &[f64] {
        self.params.tensor(self.head.dense.bias).data()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.blocks.iter().any(Block::has_batchnorm)
    }

    /// Family-level structural rules: GloNet layer iff glonet, no identity
    /// skips in glonet, no batch norm in glonet.
    pub fn check_structure(&self) -> Result<()> {
        let fam = self.family();
        let problems = [
            (self.glonet_layer.is_some() != (fam == Family::Glonet), "glonet layer present iff family is glonet"),
            (fam == Family::Glonet && self.blocks.iter().any(Block::is_residual), "glonet contains identity skips"),
            (fam == Family::Glonet && self.has_batchnorm(), "glonet contains batch normalization"),
            (fam.is_residual() && !self.blocks.iter().all(Block::is_residual), "residual family has non-residual block"),
            (fam.uses_batchnorm() != self.has_batchnorm() && !self.blocks.is_empty(), "batch norm presence disagrees with family"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("{fam}: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.flatten(),
            buffers: self.buffers.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format '{}'", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut model = build_model(&ckpt.config)?;
        model.params.load_flat(&ckpt.params)?;
        if ckpt.buffers.len() != model.buffers.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} batch-norm buffers, model needs {}",
                ckpt.buffers.len(),
                model.buffers.len()
            )));
        }
        model.buffers = ckpt.buffers;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "glonet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: config plus flat parameters in block order.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<f64>,
    buffers: Vec<RunningStats>,
}
