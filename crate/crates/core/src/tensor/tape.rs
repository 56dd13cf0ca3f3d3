//! Operation tape and tensor handles.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Element;

/// How a node was produced, with everything backward needs saved inline.
///
/// Input ids always refer to earlier nodes, so a single reverse sweep over
/// the node list visits operations in exact reverse execution order.
#[derive(Debug)]
pub(crate) enum Op<E: Element> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { x: usize },
    Scale { x: usize, c: E },
    Relu { x: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    Abs { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    ReduceMax { x: usize, axis: usize, argmax: Vec<u32> },
    ReduceSum { x: usize, axis: usize },
    SumAll { x: usize },
    Reshape { x: usize },
    Transpose2 { x: usize },
    GatherRows { x: usize, rows: Arc<Vec<u32>> },
    RepeatRows { x: usize, times: usize },
    GatherFlat { x: usize, idx: Arc<Vec<u32>> },
    SoftmaxCrossEntropy { logits: usize, labels: Arc<Vec<usize>>, probs: Arc<Vec<E>> },
}

#[derive(Debug)]
pub(crate) struct Node<E: Element> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<E>>,
    pub(crate) grad: Option<Vec<E>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<E>,
}

/// Ordered record of executed operations for one forward pass.
///
/// A tape is single-threaded (`Rc`-shared between its tensor handles);
/// independent graphs on separate threads each own their tape.
pub struct Tape<E: Element> {
    pub(crate) nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { nodes: Rc::clone(&self.nodes) }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("invalid shape {shape:?}: extents must be positive")));
        }
        let numel: usize = shape.iter().product();
        if numel != len {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {numel} elements but buffer has {len}"
            )));
        }
        Ok(())
    }

    /// New leaf tensor owning `data`.
    pub fn tensor(&self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Tensor<E>> {
        self.tensor_shared(shape, Arc::new(data), requires_grad)
    }

    /// New leaf tensor sharing an existing buffer (no copy).
    pub fn tensor_shared(
        &self,
        shape: &[usize],
        data: Arc<Vec<E>>,
        requires_grad: bool,
    ) -> Result<Tensor<E>> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Leaf that does not participate in gradients.
    pub fn constant(&self, shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        self.tensor(shape, data, false)
    }

    /// Trainable leaf.
    pub fn param(&self, shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        self.tensor(shape, data, true)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        self.constant(shape, vec![E::zero(); n])
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        self.constant(shape, vec![E::one(); n])
    }

    /// Identity matrix constant.
    pub fn eye(&self, n: usize) -> Result<Tensor<E>> {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        self.constant(&[n, n], data)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Arc<Vec<E>>,
        requires_grad: bool,
        op: Op<E>,
    ) -> Tensor<E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape: shape.clone(), data, grad: None, requires_grad, op });
        Tensor { tape: self.clone(), id, shape }
    }

    pub(crate) fn node_data(&self, id: usize) -> Arc<Vec<E>> {
        Arc::clone(&self.nodes.borrow()[id].data)
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to one value on a [`Tape`].
///
/// Cheap to clone; the payload is immutable after creation. Gradients live
/// on the tape and are read back through [`Tensor::grad`] after
/// [`Tensor::backward`].
pub struct Tensor<E: Element> {
    pub(crate) tape: Tape<E>,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape).finish()
    }
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), id: self.id, shape: self.shape.clone() }
    }
}

impl<E: Element> Tensor<E> {
    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_requires_grad(self.id)
    }

    /// Forward value (shared buffer).
    pub fn value(&self) -> Arc<Vec<E>> {
        self.tape.node_data(self.id)
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.value().as_ref().clone()
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() needs a scalar, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.value()[0])
    }

    /// Gradient accumulated by `backward`, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Reverse sweep from this scalar, accumulating gradients on the tape.
    ///
    /// Repeated calls without a fresh tape accumulate into existing grads.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, shape is {:?}",
                self.shape
            )));
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        accumulate(&mut nodes, self.id, vec![E::one()]);
        for id in (0..=self.id).rev() {
            if nodes[id].grad.is_none() || !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            // Consume the grad: only leaves keep theirs, so a repeated
            // backward() accumulates into leaves without double-counting
            // through interior nodes.
            let grad = nodes[id].grad.take().expect("grad present");
            ops::backprop_node(&mut nodes, id, &grad);
        }
        Ok(())
    }
}

/// Add `delta` into the node's grad buffer, allocating on first touch.
pub(crate) fn accumulate<E: Element>(nodes: &mut [Node<E>], id: usize, delta: Vec<E>) {
    match &mut nodes[id].grad {
        Some(g) => {
            for (gv, dv) in g.iter_mut().zip(&delta) {
                *gv += *dv;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
