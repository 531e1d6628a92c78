use rand_distr::{Distribution, StandardNormal};

use super::real::Real;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Seed};

/// How a tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    entries: Vec<ParamEntry>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<usize> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("parameter {name}: shape/data mismatch")));
        }
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, shape, data });
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Copies every tensor into element type `T`.
    pub fn values<T: Real>(&self) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .map(|e| e.data.iter().map(|&v| T::of(v as f64)).collect())
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }
}

/// Records parameter declarations and fills them deterministically.
#[derive(Debug, Default)]
pub(crate) struct ParamBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl ParamBuilder {
    pub fn declare(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        debug_assert!(!self.specs.iter().any(|s| s.0 == name), "duplicate {name}");
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    pub fn count(&self) -> usize {
        self.specs.len()
    }

    /// Tensor `i` is drawn from its own stream, so adding a layer never
    /// perturbs the initial values of the others.
    pub fn materialize(&self, seed: Seed) -> Parameters {
        let mut params = Parameters::new();
        for (i, (name, shape, init)) in self.specs.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match *init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let mut rng = stream_rng(seed, i as u64);
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (z * std) as f32
                        })
                        .collect()
                }
            };
            params
                .push(name.clone(), shape.clone(), data)
                .expect("builder declarations are unique and consistent");
        }
        params
    }
}
