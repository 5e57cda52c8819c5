use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    /// Mutable access for optimizers; copies on write if a tape still holds it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Replaces every value from `(name, tensor)` pairs that must match this
    /// store's names and shapes exactly.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut filled = vec![false; self.len()];
        for (name, t) in entries {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter {name}")))?;
            if self.values[i].shape() != t.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t.clone());
            filled[i] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Data(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }
}

/// One forward pass: parameters bound to a tape plus the dropout policy.
pub struct Forward<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    dropout: Option<(f64, RefCell<Rng>)>,
}

impl<'t> Forward<'t> {
    fn bind(tape: &'t Tape, store: &ParamStore, requires_grad: bool) -> Vec<Var<'t>> {
        store.values.iter().map(|v| tape.shared(v, requires_grad)).collect()
    }

    /// Inference: no gradients, no dropout.
    pub fn eval(tape: &'t Tape, store: &ParamStore) -> Self {
        Forward {
            tape,
            params: Self::bind(tape, store, false),
            dropout: None,
        }
    }

    /// Gradients on parameters, dropout driven by `rng` when `rate > 0`.
    pub fn train(tape: &'t Tape, store: &ParamStore, rate: f64, rng: Rng) -> Self {
        Forward {
            tape,
            params: Self::bind(tape, store, true),
            dropout: (rate > 0.0).then(|| (rate, RefCell::new(rng))),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var<'t>] {
        &self.params
    }

    pub(crate) fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        match &self.dropout {
            None => Ok(x),
            Some((rate, rng)) => {
                let draws = rng.borrow_mut().uniforms(x.value().numel());
                x.dropout(*rate, &draws)
            }
        }
    }

    /// Parameter gradients in store order (zeros for unreached parameters).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|v| {
                grads
                    .slice(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.value().numel()])
            })
            .collect()
    }
}

/// Registers parameters with their initial values.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform_in(-bound, bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal() * std).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}
