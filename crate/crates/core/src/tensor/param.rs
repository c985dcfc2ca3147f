use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`, `fan_in = shape[0]`.
    KaimingUniform,
    Zeros,
}

/// Draws a tensor of the given shape; deterministic in `seed`.
pub fn init_params<T: Real>(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor<T> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::KaimingUniform => {
            let fan_in = shape.first().copied().unwrap_or(1).max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i].tensor)
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.params[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.params[id].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Zeroes every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Records every parameter as a gradient-requiring leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.tensor.clone())).collect(),
        }
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles that were recorded in store order by other means.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_is_deterministic_and_bounded() {
        let a = init_params::<f64>(&[24, 5], InitScheme::KaimingUniform, 3);
        let b = init_params::<f64>(&[24, 5], InitScheme::KaimingUniform, 3);
        let c = init_params::<f64>(&[24, 5], InitScheme::KaimingUniform, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 0.5; // sqrt(6 / 24)
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert!(init_params::<f32>(&[3, 3], InitScheme::Zeros, 1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn store_lookup_and_duplicates() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("a.w", Tensor::filled(&[2], 1.0)).unwrap();
        s.add("b.w", Tensor::filled(&[3], 2.0)).unwrap();
        assert_eq!(s.index_of("a.w"), Some(id));
        assert!(matches!(s.add("a.w", Tensor::zeros(&[1])), Err(Error::Config(_))));
        assert_eq!(s.count_scalars(), 5);
        s.zero_where(|n| n.starts_with("b."));
        assert_eq!(s.get("b.w").unwrap().data(), &[0.0; 3]);
        assert_eq!(s.get("a.w").unwrap().data(), &[1.0; 2]);
        let tape = Tape::new();
        let bound = s.bind(&tape);
        assert_eq!(bound.vars().len(), 2);
        assert!(tape.requires_grad(bound.var(1)));
    }
}
