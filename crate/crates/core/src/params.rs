//! Named trainable parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Stable index of a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named tensor with a gradient accumulator of identical shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters. Registration order is
/// the canonical order used for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("ParamSet::add", format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(tensor.shape().to_vec());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.values_mut().fill(0.0);
        }
    }

    /// Register every parameter as a trainable tape leaf, viewing the tensor
    /// as 2-D with the last extent as columns.
    pub fn register_on(&self, tape: &mut Tape) -> Result<Vec<BufId>> {
        self.params
            .iter()
            .map(|p| {
                let (rows, cols) = view2d(p.tensor.shape());
                tape.leaf_param(p.tensor.values().to_vec(), rows, cols)
            })
            .collect()
    }

    /// Add tape gradients back into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape, ids: &[BufId]) {
        for (p, &id) in self.params.iter_mut().zip(ids) {
            if let Some(g) = tape.grad(id) {
                for (acc, v) in p.grad.values_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

/// 2-D view of an N-D shape: columns = last extent, rows = everything else.
pub fn view2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(set.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grad_shape_matches_tensor() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::zeros(vec![3, 4])).unwrap();
        assert_eq!(set.get(id).grad.shape(), &[3, 4]);
    }

    #[test]
    fn view2d_rules() {
        assert_eq!(view2d(&[32]), (1, 32));
        assert_eq!(view2d(&[71, 32]), (71, 32));
        assert_eq!(view2d(&[3, 64, 64, 32]), (3 * 64 * 64, 32));
    }
}
