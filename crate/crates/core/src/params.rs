//! Named parameter access shared by optimisers, averaging and checkpoints.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Anything that owns named trainable tensors. `visit` and `visit_mut` must
/// report the same names in the same order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }

    /// Copies all parameters, or only those with `requires_grad` set.
    fn snapshot(&self, trainable_only: bool) -> ParamSet {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t| {
            if !trainable_only || t.requires_grad() {
                out.insert(name.to_string(), t.clone().with_requires_grad(false));
            }
        });
        ParamSet(out)
    }

    /// Overwrites the data of every named tensor present in `set`. Tensors
    /// not in the set are left alone; unknown names are an error.
    fn load(&mut self, set: &ParamSet) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if let Some(src) = set.0.get(name) {
                seen += 1;
                if src.shape() != t.shape() {
                    err.get_or_insert(Error::shape("load", t.shape(), src.shape()));
                    return;
                }
                t.data_mut().copy_from_slice(src.data());
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != set.0.len() {
            return Err(Error::Config(format!(
                "parameter set has {} entries but only {seen} matched",
                set.0.len()
            )));
        }
        Ok(())
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered, named copy of parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet(pub BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn same_schema(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }
}

/// Parameter gradients by path, detached from any tape.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Adds `grads` into the grad buffers of the matching trainable tensors.
pub fn accumulate_grads<P: Parameterized + ?Sized>(module: &mut P, grads: &GradMap) -> Result<()> {
    let mut err = None;
    module.visit_mut("", &mut |name, t| {
        if t.requires_grad() {
            if let Some(g) = grads.get(name) {
                if let Err(e) = t.accumulate_grad(g) {
                    err.get_or_insert(e);
                }
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Maps parameter paths to the tape leaves created for them during a
/// forward pass, so gradients can be written back afterwards.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, path: String, t: &Tensor) -> Var {
        let v = tape.leaf(t);
        self.vars.insert(path, v);
        v
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    /// Detaches the gradients of every bound path that received one.
    pub fn collect(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    /// Adds the gradients for every bound tensor of `module` into its grad
    /// buffer. Tensors that do not require grad are skipped.
    pub fn accumulate<P: Parameterized + ?Sized>(&self, module: &mut P, prefix: &str, grads: &Gradients) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            if let Some(g) = self.vars.get(name).and_then(|&v| grads.get(v)) {
                if let Err(e) = t.accumulate_grad(g) {
                    err.get_or_insert(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}
