use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Shape, Tensor};

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter. Values are rounded to `f32`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value.round_f32());
    }

    /// Replaces a value without rounding (used by the 64-bit gradient checker).
    pub fn set_exact(&mut self, name: &str, value: Tensor) {
        if let Some(slot) = self.params.get_mut(name) {
            *slot = value;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Seeded parameter initializer. Draw order is registration order, so two
/// models built from the same config and seed are bit-identical.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, shape: impl Into<Shape>, bound: f64) -> Tensor {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new_unchecked(shape, data)
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform_range(&mut self, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| self.rng.random_range(lo..=hi)).collect();
        Tensor::new_unchecked(shape, data)
    }
}
