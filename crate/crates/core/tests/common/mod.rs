#![allow(dead_code)]

use glonet::autodiff::{Graph, Mode, NodeId};
use glonet::model::Model;
use glonet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Entries where both gradients are below this magnitude are not compared.
pub const FD_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal draws pushed at least `gap` away from zero (keeps ReLU kinks out of
/// reach of the finite-difference step).
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            if v >= 0.0 {
                v + gap
            } else {
                v - gap
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> Option<f64> {
    let m = a.abs().max(b.abs());
    (m >= FD_FLOOR).then(|| (a - b).abs() / m)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input element. `f` builds a scalar from the given leaves.
/// Returns the worst relative error seen.
pub fn check_op_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map_or(vec![0.0; t.len()], |s| s.to_vec()))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &ids);
        g.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            if let Some(e) = rel_err(analytic[k][j], numeric) {
                worst = worst.max(e);
            }
        }
    }
    worst
}

/// Weighted sum `Σ w ⊙ y` with fixed weights: a generic scalar probe of `y`.
pub fn probe(g: &mut Graph, y: NodeId, weights: &Tensor) -> NodeId {
    let w = g.input(weights.clone());
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// MSE loss of a regression model in the given mode (BN stats are not committed).
pub fn model_mse(model: &Model, x: &Tensor, y: &Tensor, mode: Mode) -> f64 {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = model.forward(&mut g, xi, mode).unwrap();
    let l = g.mse_loss(out.output, y).unwrap();
    g.value(l).item()
}

/// Worst relative error between backprop and central differences over every
/// scalar parameter of `model`.
pub fn check_model_gradients(model: &mut Model, x: &Tensor, y: &Tensor, mode: Mode) -> (f64, usize) {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = model.forward(&mut g, xi, mode).unwrap();
    let loss = g.mse_loss(out.output, y).unwrap();
    g.backward(loss).unwrap();
    model.params.zero_grads();
    model.params.absorb_grads(&g).unwrap();

    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for i in 0..model.params.len() {
        let analytic = model.params.get(i).grad().map(|s| s.to_vec());
        for j in 0..model.params.get(i).len() {
            let orig = model.params.get(i).data()[j];
            model.params.get_mut(i).data_mut()[j] = orig + FD_STEP;
            let lp = model_mse(model, x, y, mode);
            model.params.get_mut(i).data_mut()[j] = orig - FD_STEP;
            let lm = model_mse(model, x, y, mode);
            model.params.get_mut(i).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            if let Some(e) = rel_err(a, numeric) {
                worst = worst.max(e);
                compared += 1;
            }
        }
    }
    (worst, compared)
}
