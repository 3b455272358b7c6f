//! Reverse-mode automatic differentiation on dynamically shaped `f64`
//! arrays.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; a
//! [`Var`] is a copyable handle into it. [`Tape::backward`] walks the list in
//! reverse, handing each node's gradient to its backward closure. Tapes are
//! cheap, single-threaded, and built fresh for every training step;
//! parallelism lives inside the operator kernels, arranged so results do not
//! depend on the thread count.
//!
//! Scalars are arrays of shape `[1]`.

mod conv;
mod nn;

pub use conv::*;
pub use nn::*;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

pub type Arr = ArrayD<f64>;

/// Makes a `[1]`-shaped scalar array.
pub fn scalar(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[1]), v)
}

pub(crate) struct Node {
    value: Arr,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    retain: bool,
}

/// Backward closure: receives the node's context and returns one gradient
/// array per parent, in parent order.
pub(crate) type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Arr>>;

pub struct BackCtx<'a> {
    nodes: &'a [Node],
    parents: &'a [usize],
    pub value: &'a Arr,
    pub grad: &'a Arr,
}

impl<'a> BackCtx<'a> {
    /// Value of the i-th parent.
    pub fn p(&self, i: usize) -> &Arr {
        &self.nodes[self.parents[i]].value
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Arr, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite forward value");
        let mut nodes = self.nodes.borrow_mut();
        let retain = backward.is_none();
        nodes.push(Node {
            value,
            parents,
            backward,
            retain,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Marks an interior node so its gradient survives the backward pass.
    pub fn retain_grad(&self, v: Var) {
        self.nodes.borrow_mut()[v.id].retain = true;
    }

    /// Clones the node's value out of the tape.
    pub fn value(&self, v: Var) -> Arr {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Reads the node's value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Scalar extraction; panics if the node is not a single element.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.id].value;
        assert_eq!(val.len(), 1, "expected scalar node, got shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    /// Reverse sweep from a scalar root. Returns the gradients of every leaf
    /// and every `retain_grad`-marked node.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(scalar(1.0));
        let mut kept: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let ctx = BackCtx {
                    nodes: &nodes,
                    parents: &node.parents,
                    value: &node.value,
                    grad: &g,
                };
                let contributions = back(&ctx);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (pid, c) in node.parents.iter().zip(contributions) {
                    debug_assert_eq!(
                        c.shape(),
                        nodes[*pid].value.shape(),
                        "gradient shape mismatch for parent {pid}"
                    );
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            if node.retain {
                kept[id] = Some(g);
            }
        }
        Gradients { grads: kept }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf or retained node; `None` if the node never
    /// received one (unreachable from the root).
    pub fn wrt(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(*self)
    }

    pub fn value(&self) -> Arr {
        self.tape.value(*self)
    }

    pub fn scalar(&self) -> f64 {
        self.tape.scalar_value(*self)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }
}

// ---- elementwise arithmetic -------------------------------------------------

fn binary_elementwise<'t>(
    a: Var<'t>,
    b: Var<'t>,
    f: impl Fn(f64, f64) -> f64,
    back: impl Fn(&BackCtx) -> Vec<Arr> + 'static,
) -> Var<'t> {
    a.same_tape(&b);
    let value = {
        let nodes = a.tape.nodes.borrow();
        let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        out
    };
    a.tape.push(value, vec![a.id, b.id], Some(Box::new(back)))
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        binary_elementwise(self, rhs, |x, y| x + y, |ctx| {
            vec![ctx.grad.clone(), ctx.grad.clone()]
        })
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        binary_elementwise(self, rhs, |x, y| x - y, |ctx| {
            vec![ctx.grad.clone(), ctx.grad.mapv(|g| -g)]
        })
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        binary_elementwise(self, rhs, |x, y| x * y, |ctx| {
            vec![ctx.grad * ctx.p(1), ctx.grad * ctx.p(0)]
        })
    }
}

impl<'t> Var<'t> {
    pub fn neg(self) -> Var<'t> {
        let value = self.tape.with_value(self, |v| v.mapv(|x| -x));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| vec![ctx.grad.mapv(|g| -g)])),
        )
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let value = self.tape.with_value(self, |v| v.mapv(|x| x * k));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(move |ctx| vec![ctx.grad.mapv(|g| g * k)])),
        )
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let value = self.tape.with_value(self, |v| v.mapv(|x| x + k));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| vec![ctx.grad.clone()])),
        )
    }

    pub fn square(self) -> Var<'t> {
        let value = self.tape.with_value(self, |v| v.mapv(|x| x * x));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| vec![2.0 * ctx.grad * ctx.p(0)])),
        )
    }

    /// Elementwise square root; caller guarantees strictly positive input.
    pub fn sqrt(self) -> Var<'t> {
        let value = self.tape.with_value(self, |v| v.mapv(f64::sqrt));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| {
                let mut dx = ctx.grad.clone();
                dx.zip_mut_with(ctx.value, |g, &y| *g /= 2.0 * y);
                vec![dx]
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self
            .tape
            .with_value(self, |v| v.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| {
                let mut dx = ctx.grad.clone();
                dx.zip_mut_with(ctx.value, |g, &y| *g *= y * (1.0 - y));
                vec![dx]
            })),
        )
    }

    /// Smooth GELU (tanh form), used as the default activation everywhere; the
    /// kink-free profile keeps finite-difference gradient checks tight.
    pub fn gelu(self) -> Var<'t> {
        const C0: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C1: f64 = 0.044715;
        let value = self.tape.with_value(self, |v| {
            v.mapv(|x| 0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh()))
        });
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| {
                let mut dx = ctx.grad.clone();
                dx.zip_mut_with(ctx.p(0), |g, &x| {
                    let t = (C0 * (x + C1 * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x);
                    *g *= d;
                });
                vec![dx]
            })),
        )
    }

    /// Identity value, but gradients stop here.
    pub fn detach(self) -> Var<'t> {
        let value = self.tape.value(self);
        self.tape.leaf(value)
    }

    pub fn sum_all(self) -> Var<'t> {
        let value = self.tape.with_value(self, |v| scalar(v.sum()));
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|ctx| {
                let g = ctx.grad[[0]];
                vec![Arr::from_elem(ctx.p(0).raw_dim(), g)]
            })),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.tape.with_value(self, |v| v.len());
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Copy-reshape; the element count must match.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = self.tape.with_value(self, |v| {
            v.to_shape(IxDyn(shape)).expect("reshape size mismatch").to_owned()
        });
        let old_shape = self.shape();
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(move |ctx| {
                vec![ctx
                    .grad
                    .to_shape(IxDyn(&old_shape))
                    .expect("reshape back")
                    .to_owned()]
            })),
        )
    }
}

/// Mean squared error between two same-shaped vars.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).square().mean_all()
}
