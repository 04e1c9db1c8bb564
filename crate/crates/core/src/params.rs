//! Named parameter storage shared by both encoder towers and the decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DapError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors. The order is fixed by the model layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        self.frozen.resize(self.tensors.len(), false);
        for (n, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if n.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).copied().unwrap_or(false)
    }

    /// Insert every tensor into `g`: trainable ones as parameters, frozen
    /// ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if self.is_frozen(i) { g.constant(t.clone()) } else { g.param(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Insert every tensor as a constant (inference and relevance passes).
    pub fn bind_constants(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Gradients from the last backward pass, zero where none reached.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for externally created leaves, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Allocates parameters either freshly initialized or looked up from an
/// existing store, so one layout function serves both construction paths.
pub(crate) struct ParamBuilder<'a> {
    pub store: ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
    source: Option<&'a ParamStore>,
    error: Option<DapError>,
}

impl<'a> ParamBuilder<'a> {
    pub fn fresh(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::new(),
            rng: Some(rng),
            source: None,
            error: None,
        }
    }

    pub fn from_store(source: &'a ParamStore) -> Self {
        Self {
            store: ParamStore::new(),
            rng: None,
            source: Some(source),
            error: None,
        }
    }

    pub fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        let tensor = match (self.source, self.rng.as_deref_mut()) {
            (Some(src), _) => match src.find(&name) {
                Some(id) if src.get(id).shape() == (rows, cols) => src.get(id).clone(),
                Some(id) => {
                    let (r, c) = src.get(id).shape();
                    self.fail(format!("parameter `{name}` has shape {r}x{c}, expected {rows}x{cols}"));
                    Tensor::zeros(rows, cols)
                }
                None => {
                    self.fail(format!("parameter `{name}` missing from checkpoint"));
                    Tensor::zeros(rows, cols)
                }
            },
            (None, Some(rng)) => match init {
                Init::Zeros => Tensor::zeros(rows, cols),
                Init::Ones => Tensor::filled(rows, cols, 1.0),
                Init::Normal(std) => {
                    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::from_vec(rows, cols, data).expect("shape")
                }
            },
            (None, None) => unreachable!("builder has neither source nor rng"),
        };
        self.store.push(name, tensor)
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(DapError::Config(msg));
        }
    }

    pub fn finish(self) -> Result<ParamStore> {
        match self.error {
            Some(e) => Err(e),
            None => {
                if let Some(src) = self.source {
                    if src.len() != self.store.len() {
                        return Err(DapError::Config(format!(
                            "checkpoint has {} parameters, layout expects {}",
                            src.len(),
                            self.store.len()
                        )));
                    }
                }
                Ok(self.store)
            }
        }
    }
}
