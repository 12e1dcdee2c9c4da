//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! The soft-box IoU objective chains probabilities through weighted
//! centers, spreads, enclosing corners and arctangents; deriving those
//! gradients by hand is error-prone, so the loss is written once over
//! the [`Scalar`] trait and instantiated with either plain `f64`
//! (values only) or [`Var`] (values plus exact adjoints).

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Arena of computation nodes. One tape per loss evaluation; not shared
/// across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, parents: [u32; 2], partials: [f64; 2], val: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { parents, partials });
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// A differentiable input; its adjoint can be read back after `gradients`.
    pub fn leaf(&self, val: f64) -> Var<'_> {
        self.push([NO_PARENT; 2], [0.0; 2], val)
    }

    /// Reverse sweep from `root`; returns every node's adjoint.
    pub fn gradients(&self, root: Var<'_>) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[root.idx as usize] = 1.0;
        for i in (0..=root.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for p in 0..2 {
                if node.parents[p] != NO_PARENT {
                    adj[node.parents[p] as usize] += a * node.partials[p];
                }
            }
        }
        Adjoints { adj }
    }
}

/// Adjoints produced by [`Tape::gradients`], indexed by variable.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx as usize]
    }
}

/// A value recorded on a [`Tape`]. Copyable; all arithmetic records
/// nodes with local partials evaluated at forward time.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    fn unary(self, val: f64, partial: f64) -> Self {
        self.tape.push([self.idx, NO_PARENT], [partial, 0.0], val)
    }

    fn binary(self, other: Self, val: f64, pa: f64, pb: f64) -> Self {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        self.tape.push([self.idx, other.idx], [pa, pb], val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self.binary(
            o,
            self.val / o.val,
            1.0 / o.val,
            -self.val / (o.val * o.val),
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

/// Differentiable scalar: `f64` for plain evaluation, [`Var`] for
/// evaluation with gradients. Non-smooth points (`abs` at 0, `min`/`max`
/// ties) take one-sided derivatives.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn value(self) -> f64;
    /// A constant in the same computation context (same tape for `Var`).
    fn lift(self, c: f64) -> Self;
    fn ln(self) -> Self;
    fn sigmoid(self) -> Self;
    fn atan(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> Self {
        c
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sigmoid(self) -> Self {
        stable_sigmoid(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }

    fn lift(self, c: f64) -> Self {
        self.tape.leaf(c)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn sigmoid(self) -> Self {
        let s = stable_sigmoid(self.val);
        self.unary(s, s * (1.0 - s))
    }

    fn atan(self) -> Self {
        self.unary(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }

    fn abs(self) -> Self {
        self.unary(
            self.val.abs(),
            self.val.signum() * f64::from(self.val != 0.0),
        )
    }

    fn max(self, other: Self) -> Self {
        if self.val >= other.val {
            self.binary(other, self.val, 1.0, 0.0)
        } else {
            self.binary(other, other.val, 0.0, 1.0)
        }
    }

    fn min(self, other: Self) -> Self {
        if self.val <= other.val {
            self.binary(other, self.val, 1.0, 0.0)
        } else {
            self.binary(other, other.val, 0.0, 1.0)
        }
    }
}

/// Logistic function without overflow for large |x|.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
