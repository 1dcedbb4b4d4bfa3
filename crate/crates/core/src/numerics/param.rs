use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters in insertion order, plus the seeded generator used to
/// initialize them.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    /// Weight `[fan_in, fan_out]` drawn from U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn add_uniform_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        self.add_uniform(name, &[fan_in, fan_out], fan_in, fan_out)
    }

    /// Like [`Self::add_uniform_weight`] but with an arbitrary shape.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients. Missing entries are
    /// parameters that did not take part in the computation.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass, indexed like the
/// store they were computed against.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    /// Commutative merge of another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::new(0);
        s.add_zeros("a", &[2]).unwrap();
        s.add_zeros("b", &[1]).unwrap();
        assert!(s.add_zeros("a", &[1]).is_err());
        let names: Vec<_> = s.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(s.get(s.id_of("b").unwrap()).grad.shape(), &[1]);
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mk = || {
            let mut s = ParamStore::new(7);
            let id = s.add_uniform_weight("w", 10, 20).unwrap();
            s.get(id).value.clone()
        };
        let (a, b) = (mk(), mk());
        assert_eq!(a, b);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
