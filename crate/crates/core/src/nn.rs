//! Named parameter storage and initialisation.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is insertion order and is
/// part of the checkpoint contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .index
                .get(name)
                .ok_or_else(|| invalid!("parameter {name} missing from source"))?;
            if other.tensors[*j].shape() != self.tensors[i].shape() {
                return Err(invalid!(
                    "parameter {name}: shape {:?} vs {:?}",
                    other.tensors[*j].shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i] = other.tensors[*j].clone();
        }
        Ok(())
    }
}

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.push("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.push("w", Tensor::full(&[2], 3.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.get(a.id("w").unwrap()).data(), &[3.0, 3.0]);
        let mut c = ParamStore::new();
        c.push("w", Tensor::zeros(&[3]));
        assert!(a.load_from(&c).is_err());
    }
}
