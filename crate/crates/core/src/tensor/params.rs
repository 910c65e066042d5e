use std::collections::HashMap;

use super::{Gradients, Record, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.id(name)?;
        Ok(&mut self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a grad-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone().with_grad()))
            .collect();
        BoundParams { vars }
    }

    /// Registers parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        BoundParams { vars }
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.iter()
            .map(|(n, t)| Record::new(format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `records` (looked up as `prefix + name`),
    /// checking shapes.
    pub fn load_records(&mut self, records: &[Record], prefix: &str) -> Result<()> {
        let by_name: HashMap<&str, &Record> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for i in 0..self.values.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let rec = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("weights file lacks record {key}")))?;
            if rec.tensor.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "record {key} has shape {:?}, model expects {:?}",
                    rec.tensor.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = rec.tensor.clone();
        }
        Ok(())
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Tape handles for each parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Pulls per-parameter gradients out of a backward result.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Vec<f32>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
