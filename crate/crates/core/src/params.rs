//! Named parameter registry shared by every layer.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
}

#[derive(Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    value: Option<Arc<Tensor>>,
}

/// Ordered, uniquely named parameter tensors.
///
/// A *meta* store records names and shapes only; it is used to count the
/// parameters of configurations too large to allocate.
#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    rng: ChaCha8Rng,
    meta: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            meta: false,
        }
    }

    pub fn meta() -> Self {
        ParamStore {
            meta: true,
            ..Self::new(0)
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        let name = name.into();
        let shape = shape.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let value = if self.meta {
            None
        } else {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Uniform(bound) => (0..n)
                    .map(|_| {
                        if bound > 0.0 {
                            self.rng.random_range(-bound..bound)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            Some(Arc::new(Tensor::new(shape.clone(), data).expect("consistent")))
        };
        self.entries.push(Entry { name, shape, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.entries[id.0].shape.iter().product()
    }

    /// Total number of scalar parameters.
    pub fn total_numel(&self) -> usize {
        self.ids().map(|id| self.numel(id)).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        self.entries[id.0]
            .value
            .as_deref()
            .expect("meta parameter store holds no values")
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(
            self.entries[id.0]
                .value
                .as_ref()
                .expect("meta parameter store holds no values"),
        )
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(
            self.entries[id.0]
                .value
                .as_mut()
                .expect("meta parameter store holds no values"),
        )
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.shape(id) {
            return Err(Error::shape("ParamStore::set", self.shape(id), value.shape()));
        }
        self.entries[id.0].value = Some(Arc::new(value));
        Ok(())
    }

    /// Overwrites every parameter with `f(name, shape)`; handy for building
    /// analytically known configurations in tests.
    pub fn fill_with(&mut self, mut f: impl FnMut(&str, &[usize]) -> Option<Tensor>) -> Result<()> {
        for i in 0..self.entries.len() {
            let id = ParamId(i);
            if let Some(t) = f(&self.entries[i].name, &self.entries[i].shape) {
                self.set(id, t)?;
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.entries.len())
            .field("numel", &self.total_numel())
            .field("meta", &self.meta)
            .finish()
    }
}
