//! Dense 64-bit tensors with a dynamic reverse-mode tape.
//!
//! Every operation produces a fresh immutable [`Tensor`]. When any operand
//! requires a gradient the result records its parents and a backward closure,
//! so the graph is rebuilt on every forward pass. [`Tensor::backward`] walks
//! that graph in reverse topological order and accumulates gradients into the
//! leaves that asked for them.

mod conv;
mod gradcheck;
mod linalg;
mod nn;
mod ops;
mod param;
mod shape;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use conv::Conv2dOptions;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, FD_STEP, REL_ERR_FLOOR};
pub use linalg::gemm;
pub use nn::UpsampleMode;
pub use ops::{inverse_softplus, softplus_value, MIN_DIVISOR};
pub use param::{Module, Parameter};

/// Gradient of a node's output, mapped to one optional gradient per parent.
///
/// The second argument flags which parents actually need a gradient so that
/// expensive branches (e.g. the input gradient of the first convolution) can
/// be skipped.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = NO_GRAD.with(|flag| flag.replace(true));
        NoGradGuard { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|flag| flag.set(self.previous));
    }
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: None,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Marks a leaf as trainable. Non-leaf tensors cannot change status.
    pub fn requires_grad(self, flag: bool) -> Tensor {
        assert!(
            self.inner.node.is_none(),
            "requires_grad can only be set on leaf tensors"
        );
        let shape = self.inner.shape.clone();
        let data = match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        };
        Tensor::leaf(shape, data, flag)
    }

    /// Builds a tensor from an operation's forward result.
    ///
    /// If grad recording is enabled and any parent requires a gradient the
    /// backward closure is kept; otherwise it is dropped immediately.
    pub fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        let node = needs.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad: needs,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// A new untracked leaf sharing no graph with `self`.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn same_as(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.data[0].is_finite() {
            return Err(Error::invalid("backward from a non-finite loss"));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for tensor in order.iter().rev() {
            let Some(grad) = grads.remove(&tensor.key()) else {
                continue;
            };
            match &tensor.inner.node {
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.inner.requires_grad).collect();
                    let parent_grads = (node.backward)(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = tensor.inner.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes reachable from `self`.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.key()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(node) = &tensor.inner.node {
                for parent in &node.parents {
                    if parent.inner.requires_grad && !visited.contains(&parent.key()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
