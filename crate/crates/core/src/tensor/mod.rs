//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer. Tensors built by
//! operations remember their inputs, forming a DAG; [`Tensor::backward`]
//! walks that DAG once in reverse topological order (see [`GradTape`])
//! and deposits a gradient on every `requires_grad` leaf exactly once.
//!
//! Values are immutable once created except for two explicit hooks used
//! by the optimizer: [`Tensor::set_data`] (in-place weight update) and
//! the gradient slot. Tensors are cheap to clone (shared buffer) and safe
//! to send across threads; a backward pass itself is single-threaded.

mod autograd;
mod gemm;
mod ops;

pub use autograd::GradTape;

use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicUsize = AtomicUsize::new(1);

/// Interior node kind: how a tensor was produced, holding the inputs
/// needed to propagate gradients. `Leaf` marks externally supplied data
/// (inputs and trainable weights).
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    },
    BiasChannel {
        input: Tensor,
        bias: Tensor,
    },
    BiasRow {
        input: Tensor,
        bias: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Sigmoid {
        input: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        input: Tensor,
        factor: f64,
    },
    ConcatChannels {
        inputs: Vec<Tensor>,
    },
    ConcatRows {
        inputs: Vec<Tensor>,
    },
    SoftmaxRows {
        input: Tensor,
    },
    RoiPool {
        input: Tensor,
        /// Flat input index backing each output cell; -1 for cells whose
        /// clamped window was empty (their value is 0 and no gradient flows).
        argmax: Arc<Vec<i64>>,
    },
    MatMul {
        a: Tensor,
        b: Tensor,
    },
    Transpose {
        input: Tensor,
    },
    Reshape {
        input: Tensor,
    },
    Gather {
        input: Tensor,
        indices: Arc<Vec<usize>>,
    },
    SumAll {
        input: Tensor,
    },
    UpsampleNearest2 {
        input: Tensor,
    },
    BceWithLogits {
        logits: Tensor,
        targets: Arc<Vec<f64>>,
    },
    SmoothL1 {
        pred: Tensor,
        targets: Arc<Vec<f64>>,
    },
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: RwLock<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// Shared-buffer float64 tensor. Cloning shares the storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

/// Read guard over a tensor's flat data, dereferencing to `[f64]`.
pub struct DataRef<'a>(RwLockReadGuard<'a, Vec<f64>>);

impl Deref for DataRef<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {:?} does not describe {} elements",
            shape,
            data.len()
        );
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced in shape {shape:?}"
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Plain data leaf: no gradient is tracked into it.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf: backward deposits a gradient here.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        // Rebuild with the flag; leaves carry no op state worth preserving.
        Ok(Tensor::build(
            t.inner.shape.clone(),
            t.to_vec(),
            true,
            Op::Leaf,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel_of(shape)], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; numel_of(shape)], false, Op::Leaf)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor::build(shape, data, requires_grad, op)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    /// Borrow the flat row-major data.
    pub fn data(&self) -> DataRef<'_> {
        DataRef(self.inner.data.read().expect("tensor data lock poisoned"))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    /// Element at a multi-dimensional index (test/debug convenience).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape().len());
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "index {index:?} out of bounds at axis {i}");
            flat = flat * dim + ix;
        }
        self.data()[flat]
    }

    /// Replace the stored values (same element count). Used by the
    /// optimizer and checkpoint loader; never called on op outputs.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "set_data with {} elements on tensor of shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        *self.inner.data.write().expect("tensor data lock poisoned") = data;
        Ok(())
    }

    /// Gradient deposited by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.read().expect("grad lock poisoned").clone()
    }

    /// Remove and return the stored gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.write().expect("grad lock poisoned").take()
    }

    pub(crate) fn set_grad(&self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.numel());
        *self.inner.grad.write().expect("grad lock poisoned") = Some(grad);
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Op {
    /// Input tensors of this operation, in a fixed order.
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![input.clone(), kernel.clone()],
            Op::BiasChannel { input, bias } | Op::BiasRow { input, bias } => {
                vec![input.clone(), bias.clone()]
            }
            Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Scale { input, .. }
            | Op::SoftmaxRows { input }
            | Op::Transpose { input }
            | Op::Reshape { input }
            | Op::SumAll { input }
            | Op::UpsampleNearest2 { input } => vec![input.clone()],
            Op::Add { a, b } => vec![a.clone(), b.clone()],
            Op::ConcatChannels { inputs } | Op::ConcatRows { inputs } => inputs.clone(),
            Op::RoiPool { input, .. } => vec![input.clone()],
            Op::MatMul { a, b } => vec![a.clone(), b.clone()],
            Op::Gather { input, .. } => vec![input.clone()],
            Op::BceWithLogits { logits, .. } => vec![logits.clone()],
            Op::SmoothL1 { pred, .. } => vec![pred.clone()],
        }
    }
}
