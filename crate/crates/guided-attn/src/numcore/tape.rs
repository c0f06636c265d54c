use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{Precision, Tensor, Track};

pub type NodeId = usize;

/// Adjoint function: receives the output gradient and accumulates
/// contributions into parent slots.
pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut Accum)>;

pub(crate) struct Node {
    pub back: Option<BackFn>,
    pub is_leaf: bool,
}

/// Gradient accumulator handed to adjoint functions during backward.
pub struct Accum {
    slots: Vec<Option<Vec<f64>>>,
}

impl Accum {
    /// Accumulate into the slot for `id`; `len` is the flat length of that
    /// node, `write` adds its contribution in place.
    pub fn add(&mut self, id: NodeId, len: usize, write: impl FnOnce(&mut [f64])) {
        let slot = self.slots[id].get_or_insert_with(|| vec![0.0; len]);
        write(slot);
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.slots[id].take()
    }
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Persistent leaf gradients; repeated backward calls accumulate here.
    leaf_grads: HashMap<NodeId, Vec<f64>>,
}

/// Dynamic differentiation record. Rebuilt for every forward pass; cloning
/// the handle shares the record. Not thread-safe by design — one tape per
/// execution context.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Tape {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        })))
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push_node(&self, _len: usize, back: Option<BackFn>, is_leaf: bool) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { back, is_leaf });
        inner.nodes.len() - 1
    }

    /// Register a trainable leaf tensor on this tape.
    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Tensor {
        let data = precision.quantize_vec(data);
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let node = self.push_node(data.len(), None, true);
        Tensor::from_parts(
            shape,
            data,
            precision,
            Some(Track {
                tape: self.clone(),
                node,
            }),
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn leaf_grad(&self, node: NodeId) -> Option<Vec<f64>> {
        self.0.borrow().leaf_grads.get(&node).cloned()
    }

    /// Drop accumulated leaf gradients.
    pub fn reset_grads(&self) {
        self.0.borrow_mut().leaf_grads.clear();
    }

    fn backward_from(&self, node: NodeId) {
        let inner = self.0.borrow();
        let mut accum = Accum {
            slots: vec![None; inner.nodes.len()],
        };
        accum.slots[node] = Some(vec![1.0]);
        let mut leaf_updates: Vec<(NodeId, Vec<f64>)> = Vec::new();
        for id in (0..=node).rev() {
            let Some(grad) = accum.take(id) else { continue };
            let n = &inner.nodes[id];
            if n.is_leaf {
                leaf_updates.push((id, grad));
            } else if let Some(back) = &n.back {
                back(&grad, &mut accum);
            }
        }
        drop(inner);
        let mut inner = self.0.borrow_mut();
        for (id, grad) in leaf_updates {
            let slot = inner
                .leaf_grads
                .entry(id)
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (acc, g) in slot.iter_mut().zip(&grad) {
                *acc += g;
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients of `requires_grad`
/// leaves accumulate on the tape; calling again without `reset_grads` adds
/// on top.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward() needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let track = loss.track.as_ref().ok_or_else(|| {
        Error::Usage("backward() on an untracked tensor (no tape connection)".into())
    })?;
    track.tape.backward_from(track.node);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{add, mean_all, mul, sum_all};

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0], Precision::F64);
        let loss = sum_all(&x);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_mean_square_gradient_is_x_over_n() {
        let tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(vec![4], data.clone(), Precision::F64);
        let sq = mul(&x, &x);
        let loss = crate::numcore::scale(&mean_all(&sq), 0.5);
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(&data) {
            assert!((gi - xi / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3], vec![1.0, 2.0, 3.0], Precision::F64);
        let loss = sum_all(&x);
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        tape.reset_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0], Precision::F64);
        let y = add(&x, &x);
        assert!(backward(&y).is_err());
    }

    #[test]
    fn untracked_loss_rejected() {
        let x = Tensor::scalar(1.0, Precision::F64);
        assert!(backward(&x).is_err());
    }
}
