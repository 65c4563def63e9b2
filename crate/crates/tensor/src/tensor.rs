//! The tensor handle and the reverse-mode tape.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the op that
//! produced it. Ops only record themselves when gradients are enabled on the
//! current thread and at least one input requires a gradient, so inference
//! under [`no_grad`] builds no graph at all.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};

/// Backward closure: `(output value, output gradient) -> per-parent gradient`.
///
/// Returns one entry per parent, `None` where the parent does not need one.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Dense row-major `f64` array with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::invalid(
            op,
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    if numel_of(shape) != len {
        return Err(TensorError::invalid(
            op,
            format!(
                "shape {shape:?} holds {} elements but buffer has {len}",
                numel_of(shape)
            ),
        ));
    }
    Ok(())
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Arc::new(node))
    }

    fn leaf_unchecked(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::from_node(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: None,
        })
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape("tensor", shape, data.len())?;
        Ok(Self::leaf_unchecked(data, shape.to_vec(), false))
    }

    /// Leaf tensor that accumulates a gradient on `backward`.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape("variable", shape, data.len())?;
        Ok(Self::leaf_unchecked(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf_unchecked(vec![v], vec![], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Self::leaf_unchecked(vec![v; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds an op output. Records the op only when grad mode is on and a
    /// parent requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name}");
        let track = is_grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let op = track.then(|| Op {
            name,
            parents,
            backward,
        });
        Self::from_node(Node {
            shape,
            data,
            requires_grad: track,
            grad: Mutex::new(None),
            op,
        })
    }

    /// Untracked result that still satisfies the shape invariant.
    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self::leaf_unchecked(data, shape, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name)
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn set_grad(&self, grad: Option<Vec<f64>>) {
        *self.0.grad.lock().expect("grad lock") = grad;
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf_unchecked(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Fresh leaf with the given value that keeps this tensor's gradient.
    pub(crate) fn replace_value(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.numel());
        let t = Self::leaf_unchecked(data, self.0.shape.clone(), self.0.requires_grad);
        t.set_grad(self.grad());
        t
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are added to every
    /// `requires_grad` leaf; repeated calls accumulate until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; deep graphs would overflow the stack.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key(), ());
        while let Some((node, child)) = stack.pop() {
            let parents: &[Tensor] = node.0.op.as_ref().map_or(&[], |op| &op.parents);
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.key(), ()).is_none() {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.op {
                Some(op) => {
                    let parent_grads = (op.backward)(&node.0.data, &g);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.name);
                    for (parent, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", op.name);
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert!(Tensor::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let err = x.mul_scalar(2.0).backward().unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::variable(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::variable(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.mul_scalar(3.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(is_grad_enabled());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        // loss = x*x + x  => d/dx = 2x + 1
        let x = Tensor::variable(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
