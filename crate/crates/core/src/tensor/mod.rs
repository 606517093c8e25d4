//! Minimal reverse-mode automatic differentiation engine.
//!
//! Tensors are dense row-major arrays of `f64` (default) or `f32`, linked into
//! a dynamically built computation graph. Calling [`backward`] on a scalar
//! root accumulates adjoints into every reachable tensor that requires
//! gradients. Graphs are rebuilt each step; parameters are long-lived leaves
//! whose data the optimizer updates in place.

pub mod check;
pub mod nn;
pub mod ops;
pub mod param;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssignOps};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Storage precision of a run, recorded in checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element type of a tensor. Implemented for `f32` and `f64`;
/// 64-bit is the default precision, 32-bit is selectable per run.
pub trait Element:
    Float + NumAssignOps + Sum<Self> + LinalgScalar + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    /// Bytes per element in the checkpoint payload.
    const BYTE_WIDTH: usize;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        Self::from_f64(standard_normal(rng))
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<F> = Box<dyn Fn(&[F])>;

pub(crate) struct Node<F: Element> {
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Inner<F: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: Cell<bool>,
    node: Option<Node<F>>,
}

/// Cheap clonable handle to a node in the computation graph.
pub struct Tensor<F: Element> {
    inner: Rc<Inner<F>>,
}

impl<F: Element> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<F: Element> Tensor<F> {
    fn build(shape: Vec<usize>, data: Vec<F>, requires_grad: bool, node: Option<Node<F>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                node,
            }),
        }
    }

    /// Constant tensor that never takes gradients.
    pub fn constant(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor; the usual constructor for trainable parameters.
    pub fn leaf(shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<F>, node: Node<F>) -> Self {
        Self::build(shape, data, true, Some(node))
    }

    pub fn scalar(v: F) -> Self {
        Self::build(vec![], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![F::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::constant(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    /// Leaf filled with `N(0, std^2)` samples.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(standard_normal(rng) * std))
            .collect();
        Self::build(shape.to_vec(), data, true, None)
    }

    /// Leaf filled with `U(lo, hi)` samples.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw values. Only sensible on leaves
    /// (optimizer updates, checkpoint restore).
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        debug_assert!(self.is_leaf(), "in-place mutation of a non-leaf tensor");
        self.inner.data.borrow_mut()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.into_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (freeze/unfreeze).
    pub fn set_requires_grad(&self, value: bool) {
        debug_assert!(self.is_leaf(), "requires_grad is only togglable on leaves");
        if !value {
            *self.inner.grad.borrow_mut() = None;
        }
        self.inner.requires_grad.set(value);
    }

    pub fn grad(&self) -> Ref<'_, Option<Vec<F>>> {
        self.inner.grad.borrow()
    }

    pub fn grad_to_f64(&self) -> Option<Vec<f64>> {
        self.grad()
            .as_ref()
            .map(|g| g.iter().map(|v| v.into_f64()).collect())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn wants_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Accumulate into the gradient buffer through `f`, allocating zeros on
    /// first touch. No-op when the tensor does not participate in gradients.
    pub(crate) fn grad_write<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> Option<R> {
        if !self.wants_grad() {
            return None;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![F::zero(); self.numel()]);
        Some(f(buf))
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[F]) {
        self.grad_write(|g| {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += *ci;
            }
        });
    }
}

pub(crate) fn make_output<F: Element>(
    shape: Vec<usize>,
    data: Vec<F>,
    inputs: Vec<Tensor<F>>,
    backward: impl Fn(&[F]) + 'static,
) -> Tensor<F> {
    if inputs.iter().any(Tensor::wants_grad) {
        Tensor::with_node(
            shape,
            data,
            Node {
                inputs,
                backward: Box::new(backward),
            },
        )
    } else {
        Tensor::build(shape, data, false, None)
    }
}

/// Reverse-mode sweep from a scalar root.
///
/// Every reachable tensor with `requires_grad` accumulates `droot/dx`;
/// repeated calls without zeroing add up. Frozen leaves receive nothing.
pub fn backward<F: Element>(root: &Tensor<F>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    if root.inner.node.is_none() && !root.wants_grad() {
        return Ok(());
    }

    // Iterative post-order over the DAG: children land in `topo` before
    // their consumers, so the reversed walk processes consumers first.
    enum Visit<F: Element> {
        Enter(Tensor<F>),
        Exit(Tensor<F>),
    }
    let mut topo: Vec<Tensor<F>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(visit) = stack.pop() {
        match visit {
            Visit::Enter(t) => {
                if !seen.insert(t.id()) {
                    continue;
                }
                if let Some(node) = &t.inner.node {
                    stack.push(Visit::Exit(t.clone()));
                    for input in &node.inputs {
                        if !seen.contains(&input.id()) {
                            stack.push(Visit::Enter(input.clone()));
                        }
                    }
                }
            }
            Visit::Exit(t) => topo.push(t),
        }
    }

    // Adjoints of op outputs are transient per sweep; only leaves retain
    // accumulated gradients across repeated backward calls.
    for t in &topo {
        t.zero_grad();
    }
    root.grad_write(|g| g[0] += F::one());
    for t in topo.iter().rev() {
        let node = t.inner.node.as_ref().expect("topo holds only op outputs");
        let grad = t.inner.grad.borrow();
        if let Some(g) = grad.as_ref() {
            (node.backward)(g);
        }
    }
    Ok(())
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::ops::{add, mul};
    use super::*;

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x * x at x = 3 -> df/dx = 6
        let x = Tensor::<f64>::leaf(&[1], vec![3.0], true).unwrap();
        let y = mul(&x, &x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().as_ref().unwrap()[0], 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = a + a at a = 1 -> da = 2
        let a = Tensor::<f64>::leaf(&[1], vec![1.0], true).unwrap();
        let y = add(&a, &a).unwrap();
        backward(&y).unwrap();
        assert_eq!(a.grad().as_ref().unwrap()[0], 2.0);
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let x = Tensor::<f64>::leaf(&[1], vec![3.0], true).unwrap();
        let y = mul(&x, &x).unwrap();
        backward(&y).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().as_ref().unwrap()[0], 12.0);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = Tensor::<f64>::leaf(&[1], vec![3.0], false).unwrap();
        let w = Tensor::<f64>::leaf(&[1], vec![2.0], true).unwrap();
        let y = mul(&x, &w).unwrap();
        backward(&y).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().as_ref().unwrap()[0], 3.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let y = add(&x, &x).unwrap();
        assert!(matches!(
            backward(&y),
            Err(Error::NonScalarRoot { .. })
        ));
    }
}
