//! Flat storage for trainable parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// All trainable tensors of a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    /// Whether L2 regularization applies (weights yes, biases and BN no).
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor, decay: bool) -> ParamId {
        t.set_requires_grad(true);
        self.tensors.push(t);
        self.names.push(name.into());
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds the parameter-leaf gradients recorded on `g` into the grad slots.
    pub fn absorb_grads(&mut self, g: &Graph) -> Result<()> {
        for (key, grad) in g.param_grads() {
            let t = self
                .tensors
                .get_mut(key)
                .ok_or_else(|| Error::Usage(format!("graph references unknown parameter {key}")))?;
            t.accumulate_grad(grad)?;
        }
        Ok(())
    }

    /// Flattened values of every parameter, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameter values from a flat array produced by [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::dim(
                "load_flat",
                &[self.scalar_count()],
                &[flat.len()],
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
