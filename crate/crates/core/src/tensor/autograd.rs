use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the output gradient to one optional gradient per parent.
/// Arguments: output gradient, parent values, output value.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A tensor node in the reverse-mode gradient graph.
///
/// Leaves are created with [`Var::param`] (tracked) or [`Var::constant`].
/// Every op whose inputs include a tracked node records a backward rule;
/// ops over constants only produce constants and record nothing.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            op: "leaf",
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// Records the result of an op. Fails if `value` is not finite.
    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = parents.iter().any(Var::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(Box::new(backward) as BackwardFn))
        } else {
            (Vec::new(), None)
        };
        Ok(Var(Rc::new(Node { op, value, grad: RefCell::new(None), requires_grad, parents, backward })))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse traversal from a scalar loss. Gradients are added to each
    /// tracked node's accumulator, so repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Tensor> = HashMap::new();
        pending.insert(self.key(), Tensor::full(self.shape(), 1.0));

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else { continue };
            if let Some(backward) = &node.0.backward {
                let inputs: Vec<&Tensor> = node.0.parents.iter().map(Var::value).collect();
                let parent_grads = backward(&grad, &inputs, &node.0.value)?;
                debug_assert_eq!(parent_grads.len(), node.0.parents.len(), "{}", node.0.op);
                for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    if g.shape() != parent.shape() {
                        return Err(Error::shape(
                            "backward",
                            format!("{} produced grad {:?} for input {:?}", node.0.op, g.shape(), parent.shape()),
                        ));
                    }
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            pending.insert(parent.key(), g);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&grad)?,
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }

    /// Post-order over tracked ancestors (parents before children).
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((node, next)) = stack.pop() {
            if let Some(parent) = node.0.parents.get(next) {
                let parent = parent.clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && seen.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_sum_gradient_is_broadcast_input() {
        let w = Var::param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let x = Var::constant(Tensor::from_rows(&[&[0.5], &[-1.0]]));
        let loss = ops::sum(&ops::matmul(&w, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        for i in 0..3 {
            assert_eq!(g.at(&[i, 0]), 0.5);
            assert_eq!(g.at(&[i, 1]), -1.0);
        }
        assert!(x.grad().is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let a = Var::param(Tensor::from_rows(&[&[2.0]]));
        let loss = ops::sum(&ops::mul(&a, &a).unwrap()).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap().item(), 8.0);
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        let a = Var::param(Tensor::from_rows(&[&[3.0]]));
        let b = ops::scale(&a, 2.0).unwrap();
        let c = ops::add(&b, &b).unwrap();
        ops::sum(&c).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let a = Var::param(Tensor::zeros(&[2]));
        assert!(a.backward().is_err());
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Var::constant(Tensor::ones(&[2, 2]));
        let b = ops::matmul(&a, &a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }
}
