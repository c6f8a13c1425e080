use std::collections::{HashMap, HashSet};

use crate::ops::Op;
use crate::param::{Param, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A define-by-run tape. Every op appends one node; [`Graph::backward`] walks the
/// tape in reverse.
///
/// Parameters are bound lazily with [`Graph::param`]: binding the same parameter
/// twice returns the same leaf, so a network applied several times in one graph
/// accumulates its gradient across all applications.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Marks parameters as constants for this graph. Must be called before they are bound.
    pub fn freeze<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a Param<T>>,
    {
        for p in params {
            assert!(
                !self.bound.contains_key(&p.id()),
                "parameter {} frozen after being bound",
                p.name()
            );
            self.frozen.insert(p.id());
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter, reusing the existing leaf if already bound.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.id()) {
            return v;
        }
        let v = if self.frozen.contains(&p.id()) {
            self.input(p.value.clone())
        } else {
            self.leaf(p.value.clone())
        };
        self.bound.insert(p.id(), v);
        v
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let rg: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if rg[loss.0] {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                rg: &rg,
            };
            self.nodes[idx].op.backward(self, Var(idx), &g, &mut sink);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }
}

pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    rg: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    #[inline]
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.rg[v.0]
    }

    /// Accumulates into the gradient buffer of `v`, allocating zeros on first use.
    pub(crate) fn acc_with(&mut self, v: Var, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.rg[v.0] {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    pub(crate) fn acc(&mut self, v: Var, t: Tensor<T>) {
        if !self.rg[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound, non-frozen parameter. `None` if it did not take part.
    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.bound.get(&p.id()).and_then(|&v| self.wrt(v))
    }
}
