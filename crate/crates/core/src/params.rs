//! Central storage for trainable parameters.
//!
//! Adapters and routers hold [`ParamId`] handles into one [`ParamStore`].
//! The store is the single enforcement point for freeze semantics: a frozen
//! parameter never yields a gradient and rejects every update attempt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
            frozen: false,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Applies `f` to the parameter value. Rejected for frozen parameters.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Matrix)) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::protocol(format!(
                "update of frozen parameter '{}'",
                p.name
            )));
        }
        f(&mut p.value);
        Ok(())
    }

    /// Raw mutable access for perturbation probes (gradient checking).
    /// Deliberately bypasses the freeze check; not part of the training path.
    pub fn perturb(&mut self, id: ParamId, entry: usize, delta: f64) -> f64 {
        let v = &mut self.params[id.0].value.data[entry];
        let old = *v;
        *v = old + delta;
        old
    }

    pub fn set_entry(&mut self, id: ParamId, entry: usize, value: f64) {
        self.params[id.0].value.data[entry] = value;
    }
}
