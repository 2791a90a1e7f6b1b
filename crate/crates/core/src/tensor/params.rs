use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tape::Gradients;
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub frozen: bool,
}

/// Named, shaped, trainable arrays. Names are unique; ids are dense indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name: names are fixed by
    /// model construction code, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    /// Sets the freeze flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// True when every parameter under `prefix` is frozen (vacuously true if none).
    pub fn is_frozen(&self, prefix: &str) -> bool {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .all(|p| p.frozen)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds tape gradients into every bound, unfrozen parameter. A bound
    /// parameter the loss did not reach receives an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for &(id, var) in grads.bindings() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            let slot = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = grads.get(var) {
                for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// SHA-256 over names, shapes and exact value bits of the parameters under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies out the values under `prefix`, for later [`restore`](Self::restore).
    pub fn snapshot(&self, prefix: &str) -> Vec<(ParamId, Tensor<S>)> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, p)| (id, p.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor<S>)]) {
        for (id, v) in snapshot {
            self.params[id.0].value = v.clone();
        }
    }

    /// Overwrites values by name; shapes must agree.
    pub fn load_named(&mut self, named: &[(String, Tensor<S>)]) -> Result<()> {
        for (name, t) in named {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
