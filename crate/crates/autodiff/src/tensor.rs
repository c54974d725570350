use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{AdError, Result};
use crate::ops::Primitive;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A node recording how a tensor was produced. Parents always carry smaller
/// ids than the node itself, so reverse id order is a valid reverse
/// topological order of any graph built on one thread.
pub(crate) struct GraphNode {
    pub op: Primitive,
    pub parents: Vec<Tensor>,
}

pub(crate) struct TensorInner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub node: Option<GraphNode>,
}

/// An immutable n-dimensional array of f64 values. Cloning is cheap (shared
/// storage). Tensors produced by primitives keep a reference to their inputs,
/// forming the computation graph consumed by [`crate::backward`].
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<GraphNode>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(TensorInner {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                node,
            }),
        }
    }

    /// A tensor with explicit `requires_grad`. Errors if the data length does
    /// not match the shape product.
    pub fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AdError::ShapeDataMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor::from_parts(shape, data, requires_grad, None))
    }

    /// A differentiable leaf (e.g. a model parameter).
    pub fn leaf(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(data, shape, true)
    }

    /// A non-differentiable value.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(data, shape, false)
    }

    /// A scalar constant (shape `[]`).
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![], vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![1.0; n], false, None)
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor::zeros(other.shape())
    }

    /// A constant matrix from rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            if r.len() != ncols {
                return Err(AdError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![ncols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::constant(data, vec![rows.len(), ncols])
    }

    /// A `[1, n]` row-matrix constant.
    pub fn row(values: &[f64]) -> Tensor {
        Tensor::from_parts(vec![1, values.len()], values.to_vec(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
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

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a one-element tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Element at `(row, col)` of a matrix.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape()[1];
        self.inner.data[row * cols + col]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The same values cut loose from the graph. Shares storage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Arc::new(TensorInner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                node: None,
            }),
        }
    }

    /// A differentiable leaf holding this tensor's values.
    pub fn to_leaf(&self) -> Tensor {
        Tensor {
            inner: Arc::new(TensorInner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: true,
                node: None,
            }),
        }
    }

    pub(crate) fn node(&self) -> Option<&GraphNode> {
        self.inner.node.as_ref()
    }

    pub(crate) fn same_id(&self, other: &Tensor) -> bool {
        self.inner.id == other.inner.id
    }
}
