//! Losses, initialization, L2 regularization and Adam.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_coeff: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 1024,
            epochs: 200,
            l2_coeff: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.l2_coeff >= 0.0) {
            problems.push(format!("l2_coeff must be non-negative, got {}", self.l2_coeff));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                problems.push(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            problems.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Mean squared error between `pred[batch×1]` and a constant target.
pub fn mse_loss(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    g.mse_loss(pred, target)
}

/// Mean cross-entropy of integer labels under softmax(logits), fused in log space.
pub fn cross_entropy_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, labels)
}

/// I.i.d. `N(0, 2 / fan_in)` entries.
pub fn he_normal_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// First/second moment estimates for every parameter in a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter in `params`, reading
/// gradients from their grad slots. Weights flagged for decay get the coupled
/// L2 term `2·l2_coeff·θ` added to their gradient first.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[state.m.len()]));
    }
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = p.grad() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericFault(format!(
                    "gradient of parameter '{}' is {} at index {pos}",
                    params.name(i),
                    g[pos]
                )));
            }
        }
        if state.m[i].len() != p.len() {
            return Err(Error::dim("adam_step", p.shape(), &[state.m[i].len()]));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let corr1 = 1.0 - b1.powi(state.t as i32);
    let corr2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let decay = params.decays(i);
        let p = params.get_mut(i);
        let grad = p.grad().map(|g| g.to_vec());
        let theta = p.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..theta.len() {
            let mut gj = grad.as_ref().map_or(0.0, |g| g[j]);
            if decay {
                gj += 2.0 * cfg.l2_coeff * theta[j];
            }
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / corr1;
            let vhat = v[j] / corr2;
            theta[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
