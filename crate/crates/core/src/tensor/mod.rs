//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node of a computation
//! graph. Operations on tensors that require gradients record a backward
//! closure together with their parents; [`Tensor::backward`] walks the graph
//! in reverse topological order and accumulates gradients into the leaves.
//!
//! Graphs are built from `Rc` nodes and are therefore confined to the thread
//! that built them. Parameter values can be snapshotted with
//! [`ParamSet::snapshot`] and shared across threads as plain vectors.

mod conv;
pub mod gradcheck;
mod index;
mod ops;
mod param;

pub use conv::{conv2d, conv3d, upsample2d, upsample3d};
pub use index::{gather_rows, scatter_mean_replace};
pub use ops::*;
pub use param::{load_checkpoint, save_checkpoint, Checkpoint, ParamSet, ParamSnapshot};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{bail, Result};

type BackwardFn = dyn Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Dense row-major tensor participating in a differentiation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor that collects gradients during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            bail!(Argument, "tensor extents must be positive, got {shape:?}");
        }
        if numel(shape) != data.len() {
            bail!(
                Argument,
                "shape {shape:?} implies {} elements, data has {}",
                numel(shape),
                data.len()
            );
        }
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(&[], vec![v], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    /// Result of an operation. Gradient tracking is enabled iff any parent
    /// requires it; otherwise the backward closure is dropped immediately.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape(), self.data().to_vec()).expect("shape already validated")
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a single-element root.
    ///
    /// Gradients of leaves with `requires_grad` are *added* to whatever they
    /// already hold; call [`Tensor::zero_grad`] (or
    /// [`ParamSet::zero_grad`]) to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            bail!(Argument, "backward root must be scalar, got shape {:?}", self.shape());
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order()?;
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let pgrads = (gf.backward)(&gf.parents, node.data(), &g);
                    debug_assert_eq!(pgrads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph (parents before children).
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        #[derive(PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: HashMap<*const Node, Mark> = HashMap::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        marks.insert(self.key(), Mark::Open);
        while let Some((node, next)) = stack.pop() {
            let parents: &[Tensor] = node.0.grad_fn.as_ref().map_or(&[], |g| &g.parents);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((node, next + 1));
                if !p.requires_grad() {
                    continue;
                }
                match marks.get(&p.key()) {
                    Some(Mark::Done) => {}
                    Some(Mark::Open) => bail!(Internal, "cycle in computation graph"),
                    None => {
                        marks.insert(p.key(), Mark::Open);
                        stack.push((p, 0));
                    }
                }
            } else {
                marks.insert(node.key(), Mark::Done);
                order.push(node);
            }
        }
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let y = add(&scale(&x, 0.0), &Tensor::scalar(7.0)).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[], vec![2.0]).unwrap();
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 8.0);
        x.zero_grad();
        assert!(!x.has_grad());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // f = x*x + 3x uses x on three edges; rewritten as x(x+3).
        let x = Tensor::param(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let f = sum(&add(&mul(&x, &x).unwrap(), &scale(&x, 3.0)).unwrap());
        f.backward().unwrap();
        let g1 = x.grad().unwrap().clone();

        let x2 = Tensor::param(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let three = Tensor::new(&[3], vec![3.0; 3]).unwrap();
        let x2_detached = x2.detach();
        // d/dx [x * (x+3)] with the second factor handled explicitly.
        let f2 = sum(&add(
            &mul(&x2, &add(&x2_detached, &three).unwrap()).unwrap(),
            &mul(&x2_detached, &x2).unwrap(),
        )
        .unwrap());
        f2.backward().unwrap();
        let g2 = x2.grad().unwrap().clone();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
