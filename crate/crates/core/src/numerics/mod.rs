//! Dense `f64` tensors, a reverse-mode tape and a finite-difference harness.

mod layers;
mod tape;
mod tensor;

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use thiserror::Error;

pub use layers::{normal_tensor, Linear, Norm, LAYER_NORM_EPS};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{attention, Tensor};

pub(crate) use tape::{cox_value, sigmoid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::Usage(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<(), NumericsError> {
        let current = &self.tensors[id.0];
        if current.shape() != tensor.shape() {
            return Err(NumericsError::Shape(format!(
                "parameter {} has shape {:?}, replacement has {:?}",
                self.names[id.0],
                current.shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn entry_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }
}

/// A tape bound to a parameter store; each parameter is recorded at most once.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Gradients smaller than this are compared in absolute rather than relative
/// terms by [`finite_diff_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients of `build` against central differences
/// `(f(p+eps) - f(p-eps)) / 2eps` on every parameter coordinate.
///
/// The relative error of a coordinate is `|analytic - numeric| /
/// max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn finite_diff_check<F, E>(store: &ParamStore, eps: f64, build: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Config(format!("finite-difference eps must be positive, got {eps}")).into());
    }
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        let v = g.scalar(loss)?;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("objective is not finite".into()).into());
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (id, name, tensor) in store.iter() {
        let grad = analytic.param(id);
        for k in 0..tensor.numel() {
            let original = tensor.data()[k];
            probe.entry_mut(id)[k] = original + eps;
            let up = eval(&probe)?;
            probe.entry_mut(id)[k] = original - eps;
            let down = eval(&probe)?;
            probe.entry_mut(id)[k] = original;

            let numeric = (up - down) / (2.0 * eps);
            let exact = grad.map_or(0.0, |g| g.data()[k]);
            let denom = exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.to_string(), k));
            }
        }
    }
    Ok(report)
}
