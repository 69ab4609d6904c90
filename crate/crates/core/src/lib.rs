//! Globally connected neural networks (GloNet) and the baselines they are
//! compared against, on top of a small `f64` reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and the define-by-run tape.
//! - [`nn`]: dense, batch-norm and residual blocks, the GloNet aggregation
//!   layer, dimension adapters and heads.
//! - [`model`]: the vanilla, ResNetv2 and GloNet families and checkpoints.
//! - [`optim`]: losses, He-normal initialization and Adam with coupled L2.
//! - [`data`]: SGEMM and MNIST loaders, a synthetic regression task, splits.
//! - [`train`]: the training loop, block L1 profiling, pruning and sweeps.
//! - [`plot`]: minimal SVG line charts for the CSV outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod train;

pub use autodiff::{BnConfig, Graph, Mode, NodeId, RunningStats};
pub use error::{Error, Result};
pub use model::{build_model, Family, ForwardOutput, Model, ModelConfig};
pub use nn::HeadKind;
pub use optim::TrainConfig;
pub use params::ParamStore;
pub use tensor::Tensor;
