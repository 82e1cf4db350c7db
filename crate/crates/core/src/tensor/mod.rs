//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every op that touches a tensor requiring gradients records a node holding
//! its inputs and a backward closure. [`Tensor::backward`] rebuilds the
//! topological order of the recorded graph (the [`Tape`]) and applies the
//! chain rule once per node in reverse creation order.

mod conv;
pub mod gradcheck;
mod norm;
mod ops;
pub mod optim;
mod real;
mod sample;

pub use conv::ConvSpec;
pub use norm::BatchStats;
pub use real::Real;
pub use sample::Upsample;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Arguments handed to a node's backward closure.
pub(crate) struct Ctx<'a, T: Real> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Op<T: Real> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage.
pub struct Tensor<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(op, format!("dims must be positive, got {shape:?}")));
    }
    if numel(shape) != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
            }),
        }
    }

    /// Constant tensor (never receives gradients).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape("from_vec", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape("param", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::from_vec(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Records an op output. The node joins the graph only when gradients are
    /// enabled and some input requires them.
    pub(crate) fn make(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&Ctx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| Op { name, inputs, backward: Box::new(backward) });
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.op.as_ref().map(|op| op.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    /// Overwrites the values in place. Used by optimizers and checkpoint
    /// loading; shapes are immutable.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    pub(crate) fn accumulate(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn ensure_finite(op: &'static str, tensors: &[&Tensor<T>]) -> Result<()> {
        for t in tensors {
            if !t.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`]; interior gradients are recomputed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::MissingGradient(
                "loss is not connected to any tensor that requires gradients".into(),
            ));
        }
        let tape = Tape::record(self);
        for t in &tape.nodes {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate(&[T::ONE]);
        for t in tape.nodes.iter().rev() {
            let Some(op) = &t.node.op else { continue };
            let Some(g) = t.node.grad.borrow().clone() else { continue };
            let grads = {
                let out = t.node.data.borrow();
                (op.backward)(&Ctx { grad: &g, out: &out, inputs: &op.inputs })
            };
            debug_assert_eq!(grads.len(), op.inputs.len(), "{}", op.name);
            for (input, gi) in op.inputs.iter().zip(grads) {
                if let (true, Some(gi)) = (input.requires_grad(), gi) {
                    debug_assert_eq!(gi.len(), input.numel(), "{}", op.name);
                    input.accumulate(&gi);
                }
            }
        }
        Ok(())
    }
}

/// Recorded graph in topological order (inputs before outputs).
pub struct Tape<T: Real> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Real> Tape<T> {
    /// Collects every gradient-carrying node reachable from `root`.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node.op {
                stack.extend(op.inputs.iter().cloned());
            }
            nodes.push(t);
        }
        // Ids are issued at creation, so they already order inputs first.
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_names(&self) -> Vec<Option<&'static str>> {
        self.nodes.iter().map(|t| t.op_name()).collect()
    }

    /// True when every node's inputs appear before it.
    pub fn is_topological(&self) -> bool {
        let pos: std::collections::HashMap<u64, usize> =
            self.nodes.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        self.nodes.iter().enumerate().all(|(i, t)| match &t.node.op {
            None => true,
            Some(op) => op
                .inputs
                .iter()
                .filter_map(|inp| pos.get(&inp.id()))
                .all(|&j| j < i),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f32>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f32>::param(vec![2.0], &[1]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.scale(2.0).unwrap();
        let z = y.add(&x).unwrap().add(&y).unwrap();
        z.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.relu().unwrap().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.sum().unwrap().backward(), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn non_finite_input_names_op() {
        let x = Tensor::<f32>::from_vec(vec![f32::NAN, 1.0], &[2]).unwrap();
        match x.sigmoid() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "sigmoid"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tape_is_topological_and_visits_once() {
        let x = Tensor::<f32>::param(vec![0.5, 1.5], &[2]).unwrap();
        let a = x.sigmoid().unwrap();
        let b = a.mul(&x).unwrap();
        let c = b.add(&a).unwrap().sum().unwrap();
        let tape = Tape::record(&c);
        assert!(tape.is_topological());
        assert_eq!(tape.len(), 5);
        let names: HashSet<_> = tape.op_names().into_iter().collect();
        assert_eq!(names.len(), 5);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.scale(3.0).unwrap());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::<f32>::from_vec(vec![], &[0, 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
    }
}
