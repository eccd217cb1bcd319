//! Named trainable parameters.

use std::collections::BTreeMap;

use super::rng::{Purpose, RandomSource};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over a `[fan_in, fan_out]` matrix.
    Glorot,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter, initialized from its own random stream keyed by
    /// registration order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, src: &RandomSource) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        let n: usize = shape.iter().product();
        let mut rng = src.stream(Purpose::ParamInit, &[id.0 as u64]);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.normal()).collect(),
            Init::Glorot => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| a * (2.0 * rng.uniform() - 1.0)).collect()
            }
        };
        let t = Tensor::new(shape.to_vec(), data)
            .expect("shape product matches")
            .with_grad();
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        t.requires_grad = true;
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.grad = None);
    }

    /// Replaces parameter values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in other {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape != t.shape {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: dst.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            dst.data.clone_from(&t.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let src = RandomSource::new(3);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let pa = a.add("w", &[4, 5], Init::Glorot, &src);
        let pb = b.add("w", &[4, 5], Init::Glorot, &src);
        assert_eq!(a.get(pa).data, b.get(pb).data);
        let lim = (6.0f64 / 9.0).sqrt();
        assert!(a.get(pa).data.iter().all(|x| x.abs() <= lim));
    }

    #[test]
    fn load_checks_shape() {
        let src = RandomSource::new(3);
        let mut a = ParamStore::new();
        a.add("w", &[2], Init::Zeros, &src);
        let bad = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(a.load_from(&bad).is_err());
    }
}
