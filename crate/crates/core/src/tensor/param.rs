//! Named parameters and the per-model registry.

use serde::Serialize;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// A named, possibly frozen leaf tensor. Freezing excludes the parameter from
/// optimizer updates and gradient accumulation; its values stay bit-identical
/// across any number of training steps.
#[derive(Clone)]
pub struct Parameter<F: Element> {
    name: String,
    tensor: Tensor<F>,
}

impl<F: Element> Parameter<F> {
    pub fn new(name: impl Into<String>, tensor: Tensor<F>) -> Self {
        debug_assert!(tensor.is_leaf());
        Parameter {
            name: name.into(),
            tensor,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.tensor.set_requires_grad(!frozen);
    }
}

/// Parameter census for one filter.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Census {
    /// Number of scalar parameters matching the filter.
    pub count: usize,
    /// `count / total`, where total spans every registered parameter.
    pub fraction_of_total: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum CensusFilter<'a> {
    All,
    Trainable,
    Prefix(&'a str),
}

/// Flat registry of uniquely named parameters; every parameter of a model is
/// reachable exactly once through it.
pub struct ParamRegistry<F: Element> {
    params: Vec<Parameter<F>>,
}

impl<F: Element> Default for ParamRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> ParamRegistry<F> {
    pub fn new() -> Self {
        ParamRegistry { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParameter { name });
        }
        self.params.push(Parameter::new(name, tensor));
        Ok(())
    }

    /// Re-register every parameter of another registry (shared handles).
    pub fn absorb(&mut self, other: &ParamRegistry<F>) -> Result<()> {
        for p in &other.params {
            if self.params.iter().any(|q| q.name == p.name) {
                return Err(Error::DuplicateParameter {
                    name: p.name.clone(),
                });
            }
            self.params.push(p.clone());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn census(&self, filter: CensusFilter) -> Census {
        let total = self.total_params();
        let count = self
            .params
            .iter()
            .filter(|p| match filter {
                CensusFilter::All => true,
                CensusFilter::Trainable => !p.frozen(),
                CensusFilter::Prefix(prefix) => p.name.starts_with(prefix),
            })
            .map(Parameter::numel)
            .sum();
        Census {
            count,
            fraction_of_total: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        }
    }

    /// Flip the frozen flag on every parameter whose name matches the
    /// predicate. Returns how many parameters changed state; a zero return is
    /// the caller's cue to warn about a filter that matched nothing.
    pub fn set_frozen_where(&self, pred: impl Fn(&str) -> bool, frozen: bool) -> usize {
        let mut changed = 0;
        for p in &self.params {
            if pred(&p.name) && p.frozen() != frozen {
                p.set_frozen(frozen);
                changed += 1;
            }
        }
        changed
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Deep copy of every parameter's values, for checkpoint snapshots.
    pub fn snapshot(&self) -> Vec<(String, Vec<F>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.data().clone()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<F>)]) -> Result<()> {
        for (name, values) in snapshot {
            let p = self
                .get(name)
                .ok_or_else(|| Error::UnknownParameter { name: name.clone() })?;
            p.tensor.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
}
