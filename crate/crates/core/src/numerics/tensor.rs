use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::NumericsError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Everything a backward closure can see when the gradient reaches its node.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad_out: &'a [f64],
    /// Forward value of this node.
    pub output: &'a [f64],
    /// Inputs of the op, in the order given to [`Tensor::from_op`].
    pub parents: &'a [Tensor],
    pub(crate) needs: &'a [bool],
}

impl BackwardCtx<'_> {
    /// Whether the gradient for parent `i` will be consumed.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Returns one optional gradient per parent (`None` = no contribution).
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct GradNode {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) node: Option<GradNode>,
}

/// Dense row-major `f64` tensor with optional reverse-mode gradient tracking.
///
/// Values are immutable once created. Cloning is cheap (reference counted) and
/// clones share the same graph node and gradient accumulator.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Untracked constant.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, NumericsError> {
        if numel(shape) != data.len() {
            return Err(NumericsError::Invalid {
                op: "new",
                reason: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: gradients accumulate into it during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self, NumericsError> {
        Ok(Self::new(data, shape)?.tracked())
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<GradNode>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Builds the output of a custom differentiable op. A graph node is only
    /// recorded when at least one parent is tracked.
    pub fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if parents.iter().any(Tensor::requires_grad) {
            Self::raw(
                data,
                shape,
                true,
                Some(GradNode {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::raw(data, shape, false, None)
        }
    }

    /// Same values as a fresh trainable leaf (new identity, no history).
    pub fn tracked(&self) -> Tensor {
        Self::raw(self.inner.data.clone(), self.inner.shape.clone(), true, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
