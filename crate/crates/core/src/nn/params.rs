use std::collections::HashMap;

use rand::Rng;

use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Ordered, uniquely named parameters of one network with a parallel
/// gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        let slot = self.entries.len();
        self.index.insert(name.clone(), slot);
        let grad = Tensor::zeros_like(&value);
        self.entries.push(ParamEntry { name, value, grad });
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entry(&self, slot: usize) -> &ParamEntry<F> {
        &self.entries[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor<F> {
        &self.entries[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor<F> {
        &mut self.entries[slot].value
    }

    pub fn grad(&self, slot: usize) -> &Tensor<F> {
        &self.entries[slot].grad
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Adds `g` into the gradient buffer of `slot`.
    pub fn accumulate(&mut self, slot: usize, g: &Tensor<F>) -> Result<()> {
        self.entries[slot].grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (slot, e) in self.entries.iter().enumerate() {
            if i < e.value.len() {
                return (slot, i);
            }
            i -= e.value.len();
        }
        panic!("scalar index out of range");
    }

    /// Flat scalar access across all entries, in registration order.
    pub fn scalar(&self, i: usize) -> F {
        let (s, j) = self.locate(i);
        self.entries[s].value.data()[j]
    }

    pub fn set_scalar(&mut self, i: usize, v: F) {
        let (s, j) = self.locate(i);
        self.entries[s].value.data_mut()[j] = v;
    }

    pub fn grad_scalar(&self, i: usize) -> F {
        let (s, j) = self.locate(i);
        self.entries[s].grad.data()[j]
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value from `other`, which must have identical names
    /// and dims in the same order.
    pub fn load_values(&mut self, other: &[(String, Tensor<F>)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter().zip(other) {
            if &e.name != name || e.value.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    e.name,
                    e.value.dims(),
                    name,
                    t.dims()
                )));
            }
        }
        for (e, (_, t)) in self.entries.iter_mut().zip(other) {
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.is_finite())
    }
}

/// Kaiming-uniform (fan-in, relu gain) weights for a `Cout×Cin×k×k` conv.
pub fn kaiming_uniform<F: Real, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<F> {
    let fan_in: usize = dims[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data).expect("dims product matches")
}
