//! Named parameter storage shared by the encoder, the conditioner and the
//! optimizers.

use indexmap::IndexMap;

use crate::autograd::{Graph, Var};
use crate::error::{arg_err, IaplError, Result};
use crate::tensor::Tensor;

/// Every trainable tensor of the detector, in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return arg_err(format!("duplicate tensor `{name}`"));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| IaplError::Argument(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| IaplError::Argument(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        self.tensors.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("?")
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Keep every value exactly representable in single precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }
}

/// Backbone tensors: patch embedding, transformer blocks and the final norm.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("blocks.") || name.starts_with("norm.")
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMask(Vec<bool>);

impl TrainMask {
    pub fn all(params: &ModelParams) -> Self {
        Self(vec![true; params.len()])
    }

    pub fn none(params: &ModelParams) -> Self {
        Self(vec![false; params.len()])
    }

    pub fn from_fn(params: &ModelParams, f: impl Fn(&str) -> bool) -> Self {
        Self(params.names().map(f).collect())
    }

    pub fn only(params: &ModelParams, names: &[&str]) -> Self {
        Self::from_fn(params, |n| names.contains(&n))
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.0.get(idx).copied().unwrap_or(false)
    }
}

/// Creates graph leaves for named parameters.
pub struct Binder<'p> {
    pub params: &'p ModelParams,
    pub mask: &'p TrainMask,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ModelParams, mask: &'p TrainMask) -> Self {
        Self { params, mask }
    }

    pub fn bind(&self, g: &mut Graph<'p>, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| IaplError::Argument(format!("missing tensor `{name}`")))?;
        Ok(g.param(idx, self.params.by_index(idx), self.mask.is_trainable(idx)))
    }

    pub fn tensor(&self, name: &str) -> Result<&'p Tensor> {
        self.params.get(name)
    }
}
