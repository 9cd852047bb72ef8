use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Fails unless `other` has the same names with the same shapes.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Structure(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Structure(format!(
                    "{ka}{:?} vs {kb}{:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Merges two disjoint sets.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k.clone(), v.clone())?;
        }
        Ok(out)
    }

    /// Splits off every tensor whose name starts with `prefix`.
    pub fn split_prefix(&self, prefix: &str) -> (ParamSet, ParamSet) {
        let mut with = ParamSet::new();
        let mut without = ParamSet::new();
        for (k, v) in self.iter() {
            let target = if k.starts_with(prefix) { &mut with } else { &mut without };
            target.tensors.insert(k.clone(), v.clone());
        }
        (with, without)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// `self += other * s`
    pub fn add_scaled(&mut self, other: &ParamSet, s: f32) -> Result<()> {
        self.check_same_structure(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y * s;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
