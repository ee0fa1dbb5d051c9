//! Minimal dense f64 tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable after creation except for gradient accumulation.
//! Each operation records its parents and a backward rule; calling
//! [`Tensor::backward`] on a scalar replays the graph in reverse topological
//! order exactly once. A tape (graph) and its tensors are confined to one
//! thread; parallelism happens across independent tapes.

pub mod conv;
mod fft;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{CeaError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: upstream gradient -> per-parent gradient contributions.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Leaf parameter: receives accumulated gradient after backward.
    is_param: bool,
    /// True when any parameter is in this node's ancestry.
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

/// Dense row-major f64 tensor participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("is_param", &self.inner.is_param)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        is_param: bool,
        parents: Vec<Tensor>,
        backward: Option<BackFn>,
    ) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        let needs_grad = is_param || parents.iter().any(|p| p.inner.needs_grad);
        // Nodes outside any differentiable path do not keep the graph alive.
        let (parents, backward) = if needs_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                is_param,
                needs_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant (non-differentiable leaf) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Learnable leaf: gradient is accumulated here during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_inner(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackFn,
    ) -> Tensor {
        Tensor::new_inner(shape, data, false, parents, Some(backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn is_param(&self) -> bool {
        self.inner.is_param
    }

    /// Copy of the underlying values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// Overwrite leaf data in place (optimizer updates, finite-difference probes).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        *d = data;
    }

    pub fn nudge(&self, idx: usize, delta: f64) {
        self.inner.data.borrow_mut()[idx] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    fn check_scalar(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CeaError::Shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into the
    /// `grad` store of every parameter leaf reachable from this node.
    pub fn backward(&self) -> Result<()> {
        self.check_scalar()?;
        if !self.inner.needs_grad {
            return Ok(());
        }
        // Iterative post-order DFS; parents visited in declaration order so the
        // accumulation order is a pure function of graph structure.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id, ());
        while let Some((node, pi)) = stack.pop() {
            if pi < node.inner.parents.len() {
                let parent = node.inner.parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.inner.needs_grad && !visited.contains_key(&parent.inner.id) {
                    visited.insert(parent.inner.id, ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        // `order` is a topological order from leaves to root; walk it backwards.
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.inner.id, vec![1.0]);
        for node in order.iter().rev() {
            let gout = match pending.remove(&node.inner.id) {
                Some(g) => g,
                None => continue,
            };
            if node.inner.is_param {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&gout) {
                            *a += g;
                        }
                    }
                    None => *slot = Some(gout.clone()),
                }
            }
            if let Some(back) = &node.inner.backward {
                let grads = back(&gout);
                assert_eq!(grads.len(), node.inner.parents.len());
                for (parent, g) in node.inner.parents.iter().zip(grads) {
                    if !parent.inner.needs_grad {
                        continue;
                    }
                    if let Some(g) = g {
                        assert_eq!(g.len(), parent.numel(), "backward grad shape mismatch");
                        match pending.get_mut(&parent.inner.id) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += v;
                                }
                            }
                            None => {
                                pending.insert(parent.inner.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CeaError::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant_holds() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 3], vec![1.0; 5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]);
        assert!(p.backward().is_err());
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let p = Tensor::param(&[1], vec![3.0]);
        let y = p.mul(&p).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![12.0]); // 2 * (2x at x=3)
    }

    #[test]
    fn constant_subgraphs_drop_parents() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.inner.parents.is_empty());
    }

    #[test]
    fn backward_deterministic_bitwise() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let p = ops::randn(&[4, 4], &mut rng).into_param();
            let q = ops::randn(&[4, 4], &mut rng).into_param();
            let y = p.matmul(&q).unwrap().mul(&p.matmul(&q).unwrap()).unwrap();
            let s = y.sum_all();
            s.backward().unwrap();
            (p.grad().unwrap(), q.grad().unwrap())
        };
        let (g1a, g1b) = run();
        let (g2a, g2b) = run();
        assert_eq!(g1a, g2a);
        assert_eq!(g1b, g2b);
    }
}
