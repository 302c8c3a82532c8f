//! Dense f64 tensor substrate with tape-based reverse-mode differentiation.
//!
//! Values are stored row-major. Every forward op records a node on the
//! [`Tape`]; [`Tensor::backward`] replays the tape in reverse and accumulates
//! gradients additively into every `requires_grad` node reachable from the
//! loss. A tape is confined to one logical execution context.

mod conv;
pub mod ops;

pub use conv::{conv2d_out_dim, conv_transpose2d_out_dim};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{AfError, Result};

pub type TensorId = usize;

/// Backward rule for one recorded operation. Parents are tape ids; any
/// saved intermediates are behind `Rc` so cloning the op during the
/// backward sweep is cheap.
#[derive(Clone)]
pub(crate) enum BackOp {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// Bias broadcast along the last dimension.
    AddBiasLast(TensorId, TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// (mean, rstd) per normalized row.
        stats: Rc<Vec<(f64, f64)>>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Rc<Vec<f64>>,
        rstd: Rc<Vec<f64>>,
        /// Batch statistics (true) vs frozen running statistics (false).
        batch_stats: bool,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
    },
    Permute {
        x: TensorId,
        perm: Rc<Vec<usize>>,
    },
    Reshape(TensorId),
    Gather {
        x: TensorId,
        idx: Rc<Vec<usize>>,
    },
    Concat {
        /// (id, axis length) per part, in order.
        parts: Rc<Vec<(TensorId, usize)>>,
        axis: usize,
    },
    CrossEntropy {
        logits: TensorId,
        target: Rc<Vec<i64>>,
        ignore_index: i64,
        evaluated: usize,
    },
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: BackOp,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub flops: u64,
}

/// Records forward operations for reverse-mode differentiation.
pub struct Tape {
    pub(crate) inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                flops: 0,
            }),
        }
    }

    /// Floating-point operations executed on this tape so far
    /// (forward passes only; multiply-add counted as two).
    pub fn flops(&self) -> u64 {
        self.inner.borrow().flops
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.inner.borrow_mut().flops += n;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: BackOp,
    ) -> Tensor<'_> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        Tensor { tape: self, id }
    }

    /// New leaf tensor participating in differentiation.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor<'_> {
        self.push(data, shape, true, BackOp::Leaf)
    }

    /// New constant tensor (no gradient tracked).
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor<'_> {
        self.push(data, shape, false, BackOp::Leaf)
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor<'_> {
        let n = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    pub(crate) fn node_requires_grad(&self, id: TensorId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: TensorId,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            inner.nodes[self.id].data.as_slice()
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.data();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor the loss depends on; contributions from
    /// multiple uses accumulate additively.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            if node.data.len() != 1 {
                return Err(AfError::Shape {
                    op: "backward",
                    left: node.shape.clone(),
                    right: vec![1],
                });
            }
        }
        let mut inner = self.tape.inner.borrow_mut();
        inner.nodes[self.id].grad = Some(vec![1.0]);
        for i in (0..=self.id).rev() {
            if inner.nodes[i].grad.is_none() || !inner.nodes[i].requires_grad {
                continue;
            }
            ops::backward_step(&mut inner, i);
        }
        Ok(())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
