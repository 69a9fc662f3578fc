//! The recording tape and variable handles.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Backward function of a recorded op: maps the output gradient to one
/// optional gradient per input. `needs[i]` tells whether input `i` wants one.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// A single-use computation tape. Values are recorded as ops execute; calling
/// [`Graph::backward`] walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new(), None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, inputs: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs,
            backward,
        });
        Var { graph: self, id }
    }

    /// Record an op. The backward closure is only kept if some input needs a
    /// gradient, so constant-only subgraphs carry no backward state.
    pub(crate) fn record(
        &self,
        value: Tensor,
        inputs: &[usize],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, true, inputs.to_vec(), Some(Box::new(backward)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    pub(crate) fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar root. Returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward needs a scalar root, got {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, gi), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(gi.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`]: gradients of the leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the recorded value.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Copy of the value cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
