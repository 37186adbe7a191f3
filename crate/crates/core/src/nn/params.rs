use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor4<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.tensors[id.0]
    }
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.tensors[id.0]
    }
    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads(self.tensors.iter().map(|t| Tensor4::zeros(t.shape())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `(name, shape, data)` triples; every parameter
    /// must be present with a matching shape.
    pub fn load(&mut self, entries: Vec<(String, [usize; 4], Vec<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, shape, data) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
            let t = Tensor4::from_vec(shape, data)?;
            self.tensors[id.0].same_shape(&t)?;
            self.tensors[id.0] = t;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T: Real = f32>(pub(crate) Vec<Tensor4<T>>);

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.0[id.0]
    }
    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.0[id.0]
    }
    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
    pub fn scale(&mut self, s: T) {
        for g in &mut self.0 {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in ±gain·√(3/fan_in).
    Uniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

/// Registers parameters under a name prefix, drawing initial values from `rng`.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = format!("{}{}.", self.prefix, name);
        let mut sub = ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut sub)
    }

    pub fn param(&mut self, name: &str, shape: [usize; 4], init: Init) -> ParamId {
        let rng = &mut *self.rng;
        let value = match init {
            Init::Zeros => Tensor4::zeros(shape),
            Init::Uniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                Tensor4::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
            }
            Init::Normal { std } => {
                Tensor4::from_fn(shape, |_| T::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
            }
        };
        self.store.add(format!("{}{}", self.prefix, name), value)
    }
}
