use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor with a gradient accumulator of identical shape.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Tensor<T>,
}

/// Ordered collection of parameters addressed by dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor::zeros(tensor.shape());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            grad,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds `grad` into the accumulator. Frozen parameters are left untouched.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        if grad.numel() != p.grad.numel() {
            return Err(Error::shape(
                "accumulate",
                format!("{}: {:?} vs {:?}", p.name, grad.shape(), p.grad.shape()),
            ));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    /// Adds row `r` of `grad` into row `rows[r]` of the accumulator.
    pub fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        let d = p.grad.cols();
        if grad.rows() != rows.len() || grad.cols() != d {
            return Err(Error::shape(
                "accumulate_rows",
                format!("{}: {:?} for {} rows of width {d}", p.name, grad.shape(), rows.len()),
            ));
        }
        for (r, &row) in rows.iter().enumerate() {
            for (o, &v) in p.grad.row_mut(row).iter_mut().zip(grad.row(r)) {
                *o = *o + v;
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.convert(), p.trainable);
        }
        out
    }
}
