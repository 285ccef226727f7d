//! Named parameters and the glue that binds them onto a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Scalar, Tensor};

/// A named model parameter. Gradients are attached by the trainer after a
/// backward pass and cleared by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
}

/// Insertion-ordered collection of uniquely named parameters.
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, grad: None, trainable: false });
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Optimizer(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Optimizer(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Marks parameters trainable iff their name starts with one of the
    /// given prefixes; everything else is frozen.
    pub fn set_trainable_by_prefixes(&mut self, prefixes: &[String]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies of every value, for freeze-law and determinism assertions.
    pub fn snapshot(&self) -> HashMap<String, Tensor<S>> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Per-tape cache mapping parameter names to leaf vars. Parameters bind
/// lazily, so a tape only ever contains the parameters the forward pass
/// actually touched — branch routing falls out of this for free.
pub struct Binder {
    vars: HashMap<String, Var>,
    overrides: HashMap<String, Var>,
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

impl Binder {
    pub fn new() -> Self {
        Self { vars: HashMap::new(), overrides: HashMap::new() }
    }

    /// Force a particular tape var to stand in for a named parameter
    /// (used by finite-difference checks to perturb one tensor).
    pub fn override_param(&mut self, name: &str, var: Var) {
        self.overrides.insert(name.to_string(), var);
    }

    pub fn var<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        name: &str,
    ) -> Result<Var> {
        if let Some(&v) = self.overrides.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = tape.leaf(p.value.clone(), p.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter bound on this tape, with their vars.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}
