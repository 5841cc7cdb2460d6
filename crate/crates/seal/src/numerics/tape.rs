use std::cell::{Cell, RefCell};

use super::params::ParameterStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Backward rule of one recorded operation: maps the gradient at the output
/// to gradients at each parent, in parent order. Captured forward values are
/// cloned into the closure when the op is recorded.
pub(super) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

pub(super) struct Node<F: Scalar> {
    pub value: Tensor<F>,
    pub parents: Vec<usize>,
    pub back: Option<BackwardFn<F>>,
}

/// Reverse-mode gradient tape.
///
/// Operations append nodes, so node order is already topological; the
/// backward pass is a single reverse sweep that visits each node exactly
/// once. A tape is single-owner and not thread-safe; batch parallelism runs
/// one tape per worker.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    swept: Cell<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), swept: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf holding `value`. Leaves have no backward rule; their
    /// gradients are read out of [`Gradients`] after the sweep.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push("leaf", value, vec![], None)
    }

    /// Alias for [`Tape::leaf`] used for masks, labels, and other inputs
    /// whose gradients are never consumed.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value)
    }

    pub(super) fn push(
        &self,
        what: &str,
        value: Tensor<F>,
        parents: Vec<usize>,
        back: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        value.assert_finite(what);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, back });
        Var { tape: self, id }
    }

    pub(super) fn value_clone(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(super) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Runs the backward sweep from a scalar `loss` node.
    ///
    /// Gradients of nodes the loss does not depend on stay absent and read
    /// back as zero. Panics if `loss` is not a scalar or if the tape has
    /// already been swept (record a fresh tape per backward pass).
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        assert!(
            !self.swept.get(),
            "backward called twice on one tape; build a fresh graph per sweep"
        );
        self.swept.set(true);
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.id].value.numel() == 1,
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), F::one()));

        for id in (0..nodes.len()).rev() {
            let Some(grad_out) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let partials = back(&grad_out);
                debug_assert_eq!(partials.len(), node.parents.len());
                for (&pid, part) in node.parents.iter().zip(partials) {
                    part.assert_finite("backward");
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(part),
                    }
                }
            }
            grads[id] = Some(grad_out);
        }
        Gradients { grads }
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy; all tensor operations are
/// methods on this type (see the `ops` module).
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    pub(super) tape: &'t Tape<F>,
    pub(super) id: usize,
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value_clone(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `var`, zero-filled if the loss never reached
    /// it.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn contains(&self, var: Var<'_, F>) -> bool {
        self.grads[var.id].is_some()
    }
}

/// Leaf variables for every entry of a [`ParameterStore`], bound to one tape
/// for one forward/backward pass.
pub struct BoundParams<'s, 't, F: Scalar> {
    pub(super) store: &'s ParameterStore<F>,
    pub(super) vars: Vec<Var<'t, F>>,
}

impl<'s, 't, F: Scalar> BoundParams<'s, 't, F> {
    /// Leaf variable for the named parameter. Panics on unknown names:
    /// parameter sets are fixed at model construction.
    pub fn get(&self, name: &str) -> Var<'t, F> {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        self.vars[idx]
    }

    /// Extracts per-entry gradients in store order (None where unreached).
    pub fn extract(&self, grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars
            .iter()
            .map(|v| if grads.contains(*v) { Some(grads.wrt(*v)) } else { None })
            .collect()
    }
}
