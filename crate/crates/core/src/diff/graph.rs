//! Reverse-mode tape over tensors.
//!
//! A [`Graph`] records tensor-valued nodes during the forward pass; each
//! non-leaf node carries a backward step that maps its output gradient to
//! parent gradients. Nodes are appended in topological order, so the backward
//! pass is a single reverse sweep with deterministic accumulation order.
//! Recording is single-threaded per graph; independent graphs may run
//! concurrently.

use std::cell::RefCell;
use std::rc::Rc;

use crate::diff::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Sink receiving `(parent_id, gradient)` contributions during backward.
pub type GradSink<'a, F> = dyn FnMut(usize, Tensor<F>) + 'a;

type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut GradSink<'_, F>)>;

struct Node<F> {
    value: Tensor<F>,
    needs_grad: bool,
    backward: Option<BackFn<F>>,
}

#[derive(Clone)]
pub struct Graph<F> {
    inner: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf with no gradient flow (inputs, masks, sampled colors).
    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, false, None)
    }

    /// Leaf that participates in gradient computation (parameters).
    pub fn leaf(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, true, None)
    }

    pub(crate) fn push(&self, value: Tensor<F>, needs_grad: bool, backward: Option<BackFn<F>>) -> Var<F> {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<F> {
        self.inner.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad_of(&self, id: usize) -> bool {
        self.inner.borrow()[id].needs_grad
    }

    /// Populates gradients of every node reachable from `out`.
    ///
    /// `out` must hold exactly one element. Returns per-node gradients;
    /// parameters not reachable from `out` have no entry (treated as zero).
    pub fn backward(&self, out: &Var<F>) -> Result<Gradients<F>> {
        let nodes = self.inner.borrow();
        let out_value = &nodes[out.id].value;
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[out.id] = Some(Tensor::full(out_value.shape(), F::one()));

        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &node.backward {
                let mut sink = |pid: usize, g: Tensor<F>| {
                    debug_assert!(pid < id, "parent id must precede child");
                    if !nodes[pid].needs_grad {
                        return;
                    }
                    debug_assert_eq!(
                        g.shape(),
                        nodes[pid].value.shape(),
                        "gradient shape must match parent value shape"
                    );
                    match &mut grads[pid] {
                        Some(acc) => {
                            let dst = acc.data_mut();
                            for (d, s) in dst.iter_mut().zip(g.data()) {
                                *d += *s;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                };
                back(&grad, &mut sink);
                grads[id] = Some(grad);
            } else {
                // leaf: keep the accumulated gradient
                grads[id] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone)]
pub struct Var<F> {
    pub(crate) graph: Graph<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> Var<F> {
    pub fn value(&self) -> Tensor<F> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs_grad_of(self.id)
    }

    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    /// Re-enters the value as a constant, cutting gradient flow.
    pub fn detach(&self) -> Var<F> {
        self.graph.constant(self.value())
    }

    pub fn backward(&self) -> Result<Gradients<F>> {
        self.graph.backward(self)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the output with respect to `var`, if any path reached it.
    pub fn get(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with unreachable parameters materialized as zeros.
    pub fn get_or_zeros(&self, var: &Var<F>) -> Tensor<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.value().shape().to_vec()),
        }
    }
}
