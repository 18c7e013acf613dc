//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! recorded node owns its value and, when any input needs a gradient, a
//! closure producing the vector-Jacobian products for its inputs.
//! [`Graph::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the [`ParamStore`] the parameters were bound from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule: given the graph (for input/output values), the gradient of
/// the node output and which inputs need a gradient, return one optional
/// gradient per input.
pub(crate) type BackFn<F> = Box<dyn Fn(&Graph<F>, &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Tensor<F>,
    parents: Vec<Var>,
    back: Option<BackFn<F>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf that receives a gradient but is not tied to a parameter. Used by
    /// gradient checks to differentiate with respect to plain inputs.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Binds a parameter. Binding the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).value.clone(), true, Some(id));
        self.bound.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), back: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation node. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        back: impl Fn(&Graph<F>, &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let back: Option<BackFn<F>> = if requires_grad { Some(Box::new(back)) } else { None };
        self.nodes.push(Node { value, parents: parents.to_vec(), back, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(id)) = (g, self.nodes[i].param) {
                store.get_mut(id).grad.add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradients of a scalar with respect to every leaf that requires one,
    /// indexed by node. Non-leaf entries are `None`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<F>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.back else {
                if node.requires_grad {
                    leaves[i] = Some(g);
                }
                continue;
            };
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = back(self, &g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(leaves)
    }

    /// Gradient of a scalar with respect to one leaf created by [`Graph::input`].
    pub fn grad_of(&self, loss: Var, leaf: Var) -> Result<Tensor<F>> {
        let mut grads = self.gradients(loss)?;
        Ok(grads[leaf.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(leaf))))
    }
}
