use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FieldError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        assert!(!self.lookup.contains_key(name), "duplicate parameter {name}");
        self.lookup.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.lookup.get(name).copied().ok_or_else(|| FieldError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect(), lookup: self.lookup.clone() }
    }

    /// Order-sensitive FNV-1a digest of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.data {
                for b in v.f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Draws parameters uniformly in `[-1/√fan_in, 1/√fan_in]`, in declaration order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.rng.gen_range(-a..=a))).collect();
        Tensor::from_vec(shape, data)
    }
}
