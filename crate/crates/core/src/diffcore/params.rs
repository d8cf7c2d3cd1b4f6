use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{LblmError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named learnable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(LblmError::shape(format!("parameter `{name}` has empty shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(LblmError::shape(format!(
                "parameter `{name}` shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(ParamTensor {
            name,
            grad: vec![0.0; n],
            shape,
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Matrix view: all leading dimensions folded into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.values.len() / cols.max(1), cols)
    }

    pub fn as_tensor(&self) -> Tensor {
        let (rows, cols) = self.matrix_dims();
        Tensor {
            rows,
            cols,
            data: self.values.clone(),
        }
    }
}

/// Initialization schemes used by the model builders.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Glorot-uniform over `(fan_in, fan_out)`.
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: ParamTensor) -> Result<ParamId> {
        if self.index.contains_key(&p.name) {
            return Err(LblmError::config(format!("duplicate parameter name `{}`", p.name)));
        }
        let id = ParamId(self.params.len());
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| LblmError::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(ParamTensor::new(name, shape.to_vec(), values)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values of every parameter that also exists (same name, same
    /// shape) in `other`. Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.shape == p.shape {
                    p.values.copy_from_slice(&src.values);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Moves all parameters of `other` into this store.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            self.insert(p)?;
        }
        Ok(())
    }
}
