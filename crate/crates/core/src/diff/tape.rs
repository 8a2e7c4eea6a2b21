//! Reverse-mode gradient tape over scalar operations.
//!
//! The tape records every scalar operation of a forward computation in a
//! flat arena. A reverse sweep then accumulates adjoints, yielding the
//! derivative of one scalar output with respect to any recorded leaf.
//! Forward-mode directional derivatives are built *on top of* the tape
//! (see [`super::taped`]): a tangent is just another recorded value, so a
//! reverse sweep over a tangent-carrying graph produces mixed
//! second-order derivatives such as d/dW of a loss containing dV/dx.

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Op {
    Leaf = 0,
    Add,
    Sub,
    Mul,
    Neg,
    /// c * a, constant in `cc`
    Scale,
    /// a + c, constant in `cc`
    AddConst,
    Tanh,
    Sin,
    Cos,
    Relu,
    Min,
    Max,
}

impl Op {
    fn from_u8(v: u8) -> Op {
        // Values only ever come from `push`, which stores a valid Op.
        unsafe { std::mem::transmute(v) }
    }
}

/// Flat record of a scalar computation, replayable and reversible.
///
/// Stored struct-of-arrays: per node an opcode, up to two parent indices,
/// one optional constant and the computed value. Cleared and reused
/// between samples; never shared across threads.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    ops: Vec<u8>,
    pa: Vec<u32>,
    pb: Vec<u32>,
    cc: Vec<f64>,
    vals: Vec<f64>,
    adjoints: Vec<f64>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all recorded nodes, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.pa.clear();
        self.pb.clear();
        self.cc.clear();
        self.vals.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Value of a recorded node.
    #[inline]
    pub fn val(&self, x: Var) -> f64 {
        self.vals[x.0 as usize]
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, c: f64, v: f64) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op as u8);
        self.pa.push(a);
        self.pb.push(b);
        self.cc.push(c);
        self.vals.push(v);
        Var(id)
    }

    /// Record an input value (network weight, sample coordinate, constant).
    #[inline]
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, NONE, NONE, 0.0, v)
    }

    #[inline]
    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let v = self.vals[x.0 as usize] + self.vals[y.0 as usize];
        self.push(Op::Add, x.0, y.0, 0.0, v)
    }

    #[inline]
    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        let v = self.vals[x.0 as usize] - self.vals[y.0 as usize];
        self.push(Op::Sub, x.0, y.0, 0.0, v)
    }

    #[inline]
    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        let v = self.vals[x.0 as usize] * self.vals[y.0 as usize];
        self.push(Op::Mul, x.0, y.0, 0.0, v)
    }

    #[inline]
    pub fn neg(&mut self, x: Var) -> Var {
        let v = -self.vals[x.0 as usize];
        self.push(Op::Neg, x.0, NONE, 0.0, v)
    }

    #[inline]
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = c * self.vals[x.0 as usize];
        self.push(Op::Scale, x.0, NONE, c, v)
    }

    #[inline]
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0 as usize] + c;
        self.push(Op::AddConst, x.0, NONE, c, v)
    }

    #[inline]
    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.vals[x.0 as usize].tanh();
        self.push(Op::Tanh, x.0, NONE, 0.0, v)
    }

    #[inline]
    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.vals[x.0 as usize].sin();
        self.push(Op::Sin, x.0, NONE, 0.0, v)
    }

    #[inline]
    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.vals[x.0 as usize].cos();
        self.push(Op::Cos, x.0, NONE, 0.0, v)
    }

    #[inline]
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0 as usize].max(0.0);
        self.push(Op::Relu, x.0, NONE, 0.0, v)
    }

    /// Pointwise minimum; subgradient follows the active branch at record time.
    #[inline]
    pub fn min(&mut self, x: Var, y: Var) -> Var {
        let v = self.vals[x.0 as usize].min(self.vals[y.0 as usize]);
        self.push(Op::Min, x.0, y.0, 0.0, v)
    }

    #[inline]
    pub fn max(&mut self, x: Var, y: Var) -> Var {
        let v = self.vals[x.0 as usize].max(self.vals[y.0 as usize]);
        self.push(Op::Max, x.0, y.0, 0.0, v)
    }

    /// Dot product of two recorded vectors, accumulated left to right.
    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        assert_eq!(xs.len(), ys.len());
        let mut acc = self.mul(xs[0], ys[0]);
        for i in 1..xs.len() {
            let p = self.mul(xs[i], ys[i]);
            acc = self.add(acc, p);
        }
        acc
    }

    /// Sum of recorded values, accumulated left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Reverse sweep seeding d(root)/d(root) = 1. Adjoints of every node at
    /// or below `root` become available through [`GradTape::adjoint`].
    pub fn backward(&mut self, root: Var) {
        let n = root.0 as usize + 1;
        self.adjoints.clear();
        self.adjoints.resize(n, 0.0);
        self.adjoints[root.0 as usize] = 1.0;
        for i in (0..n).rev() {
            let g = self.adjoints[i];
            if g == 0.0 {
                continue;
            }
            let a = self.pa[i] as usize;
            match Op::from_u8(self.ops[i]) {
                Op::Leaf => {}
                Op::Add => {
                    let b = self.pb[i] as usize;
                    self.adjoints[a] += g;
                    self.adjoints[b] += g;
                }
                Op::Sub => {
                    let b = self.pb[i] as usize;
                    self.adjoints[a] += g;
                    self.adjoints[b] -= g;
                }
                Op::Mul => {
                    let b = self.pb[i] as usize;
                    self.adjoints[a] += g * self.vals[b];
                    self.adjoints[b] += g * self.vals[a];
                }
                Op::Neg => self.adjoints[a] -= g,
                Op::Scale => self.adjoints[a] += g * self.cc[i],
                Op::AddConst => self.adjoints[a] += g,
                Op::Tanh => {
                    let y = self.vals[i];
                    self.adjoints[a] += g * (1.0 - y * y);
                }
                Op::Sin => self.adjoints[a] += g * self.vals[a].cos(),
                Op::Cos => self.adjoints[a] -= g * self.vals[a].sin(),
                Op::Relu => {
                    if self.vals[a] > 0.0 {
                        self.adjoints[a] += g;
                    }
                }
                Op::Min => {
                    let b = self.pb[i] as usize;
                    if self.vals[a] <= self.vals[b] {
                        self.adjoints[a] += g;
                    } else {
                        self.adjoints[b] += g;
                    }
                }
                Op::Max => {
                    let b = self.pb[i] as usize;
                    if self.vals[a] >= self.vals[b] {
                        self.adjoints[a] += g;
                    } else {
                        self.adjoints[b] += g;
                    }
                }
            }
        }
    }

    /// Adjoint of a node after [`GradTape::backward`].
    #[inline]
    pub fn adjoint(&self, x: Var) -> f64 {
        self.adjoints.get(x.0 as usize).copied().unwrap_or(0.0)
    }

    /// Gather adjoints for a list of nodes into `out`.
    pub fn gather_adjoints(&self, vars: &[Var], out: &mut [f64]) -> Result<()> {
        if vars.is_empty() {
            return Err(Error::EmptyGradient);
        }
        assert_eq!(vars.len(), out.len());
        for (o, v) in out.iter_mut().zip(vars) {
            *o = self.adjoint(*v);
        }
        Ok(())
    }

    /// Recompute every node value from its parents in recording order.
    /// Leaf values are kept. Used to check replay determinism.
    pub fn replay(&mut self) {
        for i in 0..self.ops.len() {
            let a = self.pa[i] as usize;
            let v = match Op::from_u8(self.ops[i]) {
                Op::Leaf => self.vals[i],
                Op::Add => self.vals[a] + self.vals[self.pb[i] as usize],
                Op::Sub => self.vals[a] - self.vals[self.pb[i] as usize],
                Op::Mul => self.vals[a] * self.vals[self.pb[i] as usize],
                Op::Neg => -self.vals[a],
                Op::Scale => self.cc[i] * self.vals[a],
                Op::AddConst => self.vals[a] + self.cc[i],
                Op::Tanh => self.vals[a].tanh(),
                Op::Sin => self.vals[a].sin(),
                Op::Cos => self.vals[a].cos(),
                Op::Relu => self.vals[a].max(0.0),
                Op::Min => self.vals[a].min(self.vals[self.pb[i] as usize]),
                Op::Max => self.vals[a].max(self.vals[self.pb[i] as usize]),
            };
            self.vals[i] = v;
        }
    }
}
