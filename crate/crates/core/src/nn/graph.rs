use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Given the output gradient, the parent values and the output value,
/// return one gradient per parent (same shapes as the parents).
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of one forward pass. Build a new graph per step.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    pub(crate) rng: ChaCha8Rng,
    param_vars: HashMap<ParamId, Var>,
    pub(crate) buffer_updates: Vec<(ParamId, Tensor)>,
    pub(crate) stochastic: bool,
}

impl Graph {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
            stochastic: false,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Whether a random op (active dropout) was recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = store.param(id).trainable;
        let v = self.leaf(store.get(id).clone(), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Take the running-statistic updates recorded by batch norm in
    /// training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse-mode pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let shape = self.nodes[loss.0].value.shape.clone();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(gy) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = back(&gy, &parents, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(pg) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape, self.nodes[p].value.shape, "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Grads {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }
}
