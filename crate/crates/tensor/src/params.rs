use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::Grads;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Slot<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Named trainable tensors with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    pub(crate) slots: Vec<Slot<T>>,
    by_name: HashMap<String, ParamId>,
    pub(crate) step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = ParamId(self.slots.len());
        let n = value.len();
        self.slots.push(Slot {
            name: name.clone(),
            grad: Tensor::zeros(value.shape()),
            value,
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.uniform_range(-a, a)))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::ONE))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "set",
                format!(
                    "{} is {:?}, got {:?}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = value;
        Ok(())
    }

    /// Add the parameter gradients held in `grads`, scaled by `scale`.
    pub fn accumulate(&mut self, grads: &Grads<T>, scale: T) {
        for (id, g) in grads.params() {
            let dst = self.slots[id.0].grad.data_mut();
            for (d, &s) in dst.iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Copy of the store in another precision (values only; moments reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for s in &self.slots {
            out.add(s.name.clone(), s.value.cast())
                .expect("names are unique");
        }
        out
    }

    /// Named values, in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    /// Overwrite values from a named list; every parameter must be present
    /// with its registered shape.
    pub fn load_values(&mut self, values: &HashMap<String, Tensor<T>>) -> Result<()> {
        for s in &mut self.slots {
            let v = values.get(&s.name).ok_or_else(|| {
                TensorError::InvalidArgument(format!("missing parameter {}", s.name))
            })?;
            if v.shape() != s.value.shape() {
                return Err(TensorError::shape(
                    "load_values",
                    format!(
                        "{}: expected {:?}, got {:?}",
                        s.name,
                        s.value.shape(),
                        v.shape()
                    ),
                ));
            }
            s.value = v.clone();
        }
        Ok(())
    }
}
