use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad }
    }
}

/// All parameters of a model, keyed by dotted path.
///
/// Backed by a `BTreeMap` so every iteration (gradient reduction, optimizer
/// update, serialization) runs in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.insert(name.clone(), Parameter::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params.get(name).ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params.get_mut(name).ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Adds `grad` into the named parameter's accumulated gradient.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                left: p.grad.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        p.grad.add_assign(grad);
        Ok(())
    }
}
