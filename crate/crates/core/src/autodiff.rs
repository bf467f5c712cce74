//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends one entry to the [`Tape`]: the
//! output value, the ids of its inputs and a backward closure that holds
//! whatever intermediates the gradient rule needs. Entries are only ever
//! appended, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! A tape is meant to live for one forward/backward step and is not `Sync`.

use crate::error::{PvcError, Result};
use crate::tensor::{check_finite_enabled, Tensor};
use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Maps the upstream gradient to one gradient per input. `needs[i]` is
/// false when input `i` does not require a gradient; the rule may then
/// return `None` for it.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Entry {
    op: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Gradients are produced for it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        self.push_entry(Entry {
            op: "leaf",
            value: Rc::new(tensor),
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let mut t = tensor;
        if t.requires_grad() {
            t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        }
        self.leaf(t)
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.entries.borrow().iter().map(|e| e.op).collect()
    }

    fn push_entry(&self, entry: Entry) -> Var<'_> {
        let mut entries = self.entries.borrow_mut();
        entries.push(entry);
        Var {
            tape: self,
            id: entries.len() - 1,
        }
    }

    /// Appends an operation. The backward rule is dropped when no input
    /// requires a gradient, which also releases its saved intermediates.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        if check_finite_enabled() && !value.all_finite() {
            panic!("PVCKIT_CHECK_FINITE: non-finite output from `{op}`");
        }
        let requires_grad = {
            let entries = self.entries.borrow();
            inputs.iter().any(|v| entries[v.id].requires_grad)
        };
        self.push_entry(Entry {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    pub(crate) fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.entries.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let entries = self.entries.borrow();
        let root = &entries[loss.id];
        if root.value.len() != 1 {
            return Err(PvcError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..entries.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let entry = &entries[id];
            let Some(rule) = entry.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = entry
                .inputs
                .iter()
                .map(|&i| entries[i].requires_grad)
                .collect();
            let input_grads = rule(&upstream, &needs);
            debug_assert_eq!(input_grads.len(), entry.inputs.len());
            for ((&input, g), need) in entry.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), entries[input].value.shape(), "{}", entry.op);
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Only leaves keep their gradients.
        for (id, entry) in entries.iter().enumerate() {
            if !(entry.inputs.is_empty() && entry.requires_grad) {
                grads[id] = None;
            }
        }
        let shapes = entries.iter().map(|e| e.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when it did not contribute to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.entries.borrow(), |e| e[self.id].value.as_ref())
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        self.tape.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.entries.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.entries.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor {
        let t = self.value();
        Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_relu_piecewise() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let loss = x.relu().mean();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.relu()), Err(PvcError::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.param(Tensor::from_vec(vec![5.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        assert!(!c.requires_grad());
        assert!(!c.relu().requires_grad());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x) -> 2x
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.5, -0.5]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, -1.0]);
    }
}
