//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every value flowing through the network is a [`Tensor`]: a shape, a
//! contiguous f64 buffer, and (for values that participate in training) a
//! gradient buffer filled in by [`Tensor::backward`]. Operators build a DAG
//! of parent handles plus a backward closure; calling `backward` on a scalar
//! walks the graph in reverse topological order and accumulates gradients
//! onto every tensor that requires them.
//!
//! Tensors are immutable once created. Only the gradient cell is interior-
//! mutable, so read-only tensors can be shared freely across threads that
//! evaluate independent graphs.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod conv;
mod elementwise;
mod linalg;
mod shape_ops;

pub mod gradcheck;

pub use conv::{bilinear_resize, conv2d, pool2d, PoolKind};
pub use elementwise::{
    activation, bce_with_logits, eltwise, ln_clamped, maximum, reciprocal, scalar_add, scalar_mul,
    sigmoid_value, sum_all, ActKind, EltwiseKind,
};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport};
pub use linalg::{
    batch_norm_infer, layer_norm, linear, matmul, softmax_lastdim, transpose2d,
};
pub use shape_ops::{
    broadcast_mul_channel, concat_channels, flatten_permute, reshape, slice_batch, stack_batch,
    unflatten_permute,
};

/// Errors raised by tensor construction and the operator set.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, msg: msg.into() }
}

pub(crate) fn input_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidInput { op, msg: msg.into() }
}

/// Backward closure: given the output gradient and the parent handles,
/// accumulate contributions onto each parent that requires a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A dense N-dimensional f64 array, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(input_err(op, format!("zero-sized dimension in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(shape_err(
            op,
            format!("shape {shape:?} wants {numel} elements, data has {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    /// A constant (untracked) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape("Tensor::new", shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// A leaf tensor that accumulates a gradient during backward.
    pub fn new_param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape("Tensor::new_param", shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Result of an operator. Drops the graph edges when no parent is
    /// tracked, so inference-only forwards never retain history.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor::leaf(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn: Some(backward_fn),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A constant leaf sharing this tensor's values; cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.inner)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// tensor on the path that requires them; calling backward again without
    /// clearing sums a second pass on top of the first.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(backward_fn) = node.inner.backward_fn.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            backward_fn(&grad, &node.inner.parents);
        }
        // Intermediate gradients are scratch state; leaves keep theirs.
        for node in order {
            if node.inner.backward_fn.is_some() {
                node.clear_grad();
            }
        }
        Ok(())
    }

    /// Post-order DFS over the grad-tracked subgraph (iterative; graphs from
    /// a full forward pass are a few hundred nodes deep at most).
    fn topo_order(&self) -> Vec<Tensor> {
        use std::collections::HashSet;
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        // stack entries: (node, child_index)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, idx)) = stack.pop() {
            let parents = &node.inner.parents;
            if idx < parents.len() {
                stack.push((node.clone(), idx + 1));
                let parent = parents[idx].clone();
                if parent.requires_grad() && visited.insert(parent.ptr()) {
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

    #[test]
    fn new_rejects_mismatched_shape() {
        let err = Tensor::new(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::new_param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = sum_all(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let x = Tensor::new_param(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        let sq = eltwise(&x, &x, EltwiseKind::Mul).unwrap();
        let loss = sum_all(&sq).unwrap();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::new_param(&[2], vec![1.0, 2.0]).unwrap();
        let y = eltwise(&x, &x, EltwiseKind::Add).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::new_param(&[2], vec![3.0, 4.0]).unwrap();
        let loss = sum_all(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_grads_sum() {
        // loss = sum(x + x) => dloss/dx = 2
        let x = Tensor::new_param(&[2], vec![1.0, 1.0]).unwrap();
        let y = eltwise(&x, &x, EltwiseKind::Add).unwrap();
        let loss = sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn untracked_graph_keeps_no_parents() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = eltwise(&x, &x, EltwiseKind::Mul).unwrap();
        assert!(!y.requires_grad());
        assert!(y.inner.parents.is_empty());
    }

    #[test]
    fn detach_cuts_history() {
        let x = Tensor::new_param(&[2], vec![1.0, 2.0]).unwrap();
        let y = eltwise(&x, &x, EltwiseKind::Mul).unwrap();
        let d = y.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.data(), y.data());
    }
}
