//! Dense layers shared by the networks.

use crate::autodiff::{AdError, ParamStore, Params, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer stack with ReLU between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    /// Apply ReLU after the last layer too.
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            final_relu: false,
        }
    }

    pub fn with_final_relu(mut self) -> Self {
        self.final_relu = true;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    fn layer_names(&self, k: usize) -> (String, String) {
        (format!("{}.l{k}.w", self.prefix), format!("{}.l{k}.b", self.prefix))
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for k in 0..self.dims.len() - 1 {
            let (w, b) = self.layer_names(k);
            let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
            store.init_uniform(&w, &[fan_in, fan_out], fan_in, rng);
            store.init_uniform(&b, &[fan_out], fan_in, rng);
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor, AdError> {
        let last = self.dims.len() - 2;
        let mut h = x.clone();
        for k in 0..=last {
            let (w, b) = self.layer_names(k);
            h = h.matmul(p.get(&w)?)?.add_row(p.get(&b)?)?;
            if k < last || self.final_relu {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Single affine layer `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_uniform(&format!("{}.w", self.prefix), &[self.in_dim, self.out_dim], self.in_dim, rng);
        store.init_uniform(&format!("{}.b", self.prefix), &[self.out_dim], self.in_dim, rng);
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor, AdError> {
        x.matmul(p.get(&format!("{}.w", self.prefix))?)?
            .add_row(p.get(&format!("{}.b", self.prefix))?)
    }
}
