//! Define-by-run reverse-mode differentiation.
//!
//! Every op on a [`Var`] appends one node to its [`Tape`]. Nodes are stored in
//! creation order, which is already a topological order, so the backward pass
//! is a single reverse sweep that visits each node once.

use std::cell::{Cell, RefCell};

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Arithmetic precision of a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Every op output and every gradient is rounded to `f32`.
    F32,
    /// Full `f64`; used by the gradient checker.
    F64,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    precision: Precision,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<IndexMap<String, (usize, Tensor)>>,
    fault: RefCell<Option<String>>,
    consumed: Cell<bool>,
}

/// A tensor value tracked on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Tensor,
}

impl<'t> std::fmt::Debug for Var<'t> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            grad_enabled: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(IndexMap::new()),
            fault: RefCell::new(None),
            consumed: Cell::new(false),
        }
    }

    /// A tape that records values only; `backward` on it is rejected.
    pub fn inference(precision: Precision) -> Self {
        Tape { grad_enabled: false, ..Tape::new(precision) }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn round(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::F32 => t.round_f32(),
            Precision::F64 => t,
        }
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward, requires_grad });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let value = self.round(value);
        self.note_finite("constant", &value);
        let id = self.push(Vec::new(), None, false);
        Var { tape: self, id, value }
    }

    /// Registers (or re-uses) the named parameter from `store` as a gradient leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some((id, value)) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id: *id, value: value.clone() });
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let value = self.round(value);
        let id = self.push(Vec::new(), None, self.grad_enabled);
        self.params.borrow_mut().insert(name.to_string(), (id, value.clone()));
        Ok(Var { tape: self, id, value })
    }

    /// Records the result of an op.
    ///
    /// `backward` maps the gradient of the output to one gradient per parent,
    /// each shaped like that parent's value.
    pub fn record(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[&Var<'_>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'_> {
        let value = self.round(value);
        self.note_finite(op, &value);
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = if requires_grad {
            let ids = parents
                .iter()
                .map(|p| {
                    debug_assert!(std::ptr::eq(p.tape, self), "parent from another tape");
                    p.id
                })
                .collect();
            self.push(ids, Some(Box::new(backward)), true)
        } else {
            self.push(Vec::new(), None, false)
        };
        Var { tape: self, id, value }
    }

    fn note_finite(&self, op: &str, value: &Tensor) {
        if !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(op.to_string());
            }
        }
    }

    /// Fails if any op so far produced a NaN or infinity, naming the first
    /// offending op and the caller's stage label.
    pub fn check_finite(&self, stage: &str) -> Result<()> {
        match self.fault.borrow().as_ref() {
            Some(op) => Err(Error::NonFinite { stage: stage.to_string(), op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Returns a gradient for every parameter registered on this tape;
    /// parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) || !self.grad_enabled {
            return Err(Error::OffTape);
        }
        if loss.value.shape() != Shape::scalar() {
            return Err(Error::shape(format!("loss must be [1,1,1,1], got {:?}", loss.value.shape())));
        }
        if self.consumed.replace(true) {
            return Err(Error::invalid("backward already ran on this tape"));
        }
        self.check_finite("backward")?;

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(Shape::scalar()));

        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let pg = self.round(pg);
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => {
                        let sum = acc.zip_map(&pg, |a, b| a + b).expect("gradient shape");
                        self.round(sum)
                    }
                    None => pg,
                });
            }
        }

        let params = self.params.borrow();
        let mut out = IndexMap::with_capacity(params.len());
        for (name, (id, value)) in params.iter() {
            let g = grads
                .get_mut(*id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients { grads: out })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn dims(&self) -> [usize; 4] {
        self.value.dims()
    }

    /// A constant holding this value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value.clone())
    }
}

/// Named parameter gradients, in parameter registration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over the named subset (missing names contribute nothing).
    pub fn norm_of<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> f64 {
        names
            .into_iter()
            .filter_map(|n| self.grads.get(n))
            .flat_map(|t| t.data().iter())
            .fold(0.0, |acc, v| acc + v * v)
            .sqrt()
    }
}
