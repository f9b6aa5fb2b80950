//! Named parameter registry and dense tensor storage. The same store type
//! holds weights, gradients and optimizer moments, so shapes always mirror.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered name table built while a model is assembled.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
    index: BTreeMap<String, ParamId>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a repeated name: names are produced by model code, so a
    /// collision is a construction bug rather than bad input.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter {name} registered twice");
        let id = self.specs.len();
        self.index.insert(name.clone(), id);
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        id
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn total_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn zeros<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            shapes: self.specs.iter().map(|s| s.shape.clone()).collect(),
            tensors: self.specs.iter().map(|s| vec![T::zero(); s.numel()]).collect(),
        }
    }

    /// Truncated-normal weights (resampled beyond two standard deviations),
    /// zero biases, unit norm gains; one ChaCha stream in registry order.
    pub fn init(&self, std: f64, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = self.zeros::<f32>();
        for (spec, t) in self.specs.iter().zip(store.tensors.iter_mut()) {
            match spec.init {
                Init::Zeros => {}
                Init::Ones => t.iter_mut().for_each(|v| *v = 1.0),
                Init::TruncNormal => {
                    for v in t.iter_mut() {
                        let z = loop {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        *v = (std * z) as f32;
                    }
                }
            }
        }
        store
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    tensors: Vec<Vec<T>>,
}

pub type Gradients<T> = ParamStore<T>;

impl<T: Real> ParamStore<T> {
    pub fn from_parts(names: Vec<String>, shapes: Vec<Vec<usize>>, tensors: Vec<Vec<T>>) -> Result<Self> {
        if names.len() != shapes.len() || names.len() != tensors.len() {
            return Err(Error::ShapeMismatch("parameter table lengths differ".into()));
        }
        for ((n, s), t) in names.iter().zip(&shapes).zip(&tensors) {
            if s.iter().product::<usize>() != t.len() {
                return Err(Error::ShapeMismatch(format!("{n}: shape {s:?} vs {} values", t.len())));
            }
        }
        Ok(Self { names, shapes, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&[T]> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i][..])
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.tensors
    }

    /// Two distinct tensors borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.tensors.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn zeros_like<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            tensors: self.tensors.iter().map(|t| vec![U::zero(); t.len()]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::lit(v.as_f64())).collect())
                .collect(),
        }
    }

    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn fill(&mut self, v: T) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        let mut r = Registry::new();
        r.register("a.weight", &[3, 2], Init::TruncNormal);
        r.register("a.bias", &[3], Init::Zeros);
        r.register("n.weight", &[2], Init::Ones);
        r
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let r = reg();
        assert_eq!(r.total_count(), 11);
        let a = r.init(0.02, 7);
        assert_eq!(a, r.init(0.02, 7));
        assert_ne!(a, r.init(0.02, 8));
        assert!(a.get(0).iter().all(|v| v.abs() <= 0.04));
        assert!(a.get(1).iter().all(|&v| v == 0.0));
        assert!(a.get(2).iter().all(|&v| v == 1.0));
        let zero = r.init(0.0, 7);
        assert!(zero.get(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_and_cast() {
        let r = reg();
        let mut s = r.init(0.02, 1);
        let (x, y) = s.pair_mut(2, 0);
        x[0] = 5.0;
        y[0] = 6.0;
        assert_eq!(s.get(2)[0], 5.0);
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.get(0)[0], 6.0);
        assert!(d.same_layout(&s));
        assert_eq!(d.by_name("a.bias").unwrap().len(), 3);
    }

    #[test]
    #[should_panic]
    fn duplicate_name_panics() {
        let mut r = reg();
        r.register("a.bias", &[1], Init::Zeros);
    }
}
