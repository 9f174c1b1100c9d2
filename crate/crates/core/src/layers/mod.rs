//! Network building blocks: 1-D convolution, batch normalization, pooling,
//! dropout, dense and LSTM layers.
//!
//! Layers own no tensors. Their parameters and running statistics live in a
//! [`ParamStore`] and are addressed by [`ParamId`]; each forward pass binds
//! them onto the caller's tape through a [`ForwardCtx`].

mod conv;
mod dense;
mod lstm;
mod norm;
mod pool;

pub use conv::Conv1dLayer;
pub use dense::DenseLayer;
pub use lstm::{LstmLayer, LstmState};
pub use norm::BatchNormLayer;
pub use pool::{dropout, global_avg_pool, local_avg_pool};

pub use crate::numerics::Padding;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::{Element, NumericsError, Result, Tape, Tensor, Var};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named tensors of one model: trainable parameters plus frozen buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable parameter. Panics on duplicate names.
    pub fn param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.insert(name.into(), tensor.with_grad())
    }

    /// Registers a non-trainable buffer (running statistics).
    pub fn buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(false);
        self.insert(name.into(), tensor)
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Everything a layer needs for one forward pass.
pub struct ForwardCtx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl<T: Element> ForwardCtx<'_, T> {
    pub fn bind(&mut self, id: ParamId) -> Var {
        self.tape.param(id.0, self.store.get(id))
    }
}

pub(crate) fn uniform<T: Element>(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("finite uniform samples")
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn check_positive(op: &'static str, pairs: &[(&str, usize)]) -> Result<()> {
    for (name, v) in pairs {
        if *v == 0 {
            return Err(invalid(op, format!("{name} must be positive")));
        }
    }
    Ok(())
}
