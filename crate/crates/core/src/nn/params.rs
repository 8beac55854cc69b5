use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (off for norms and biases).
    pub decay: bool,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool, decay: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidValue(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
            decay,
        });
        Ok(ParamId(id))
    }

    /// Weight matrix with truncated-normal entries (std `std`, cut at 2 std).
    pub fn add_weight<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| truncated_normal(rng) * std).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true, true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), true, decay)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![1.0; n])?, true, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Number of trainable scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Replaces values of every parameter present in `other` by name, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// Standard normal truncated to [-2, 2] by rejection.
pub fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}
