use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;
use crate::error::{Error, Result};

/// Primitive recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// `scale·a + shift`
    Affine { scale: f64, shift: f64 },
    /// `c − a`
    RSub(f64),
    /// `a / c`
    DivConst(f64),
    /// `c / a`
    RDiv(f64),
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    a: usize,
    b: usize,
    val: f64,
}

/// Wengert list of scalar operations.
///
/// Every node only references earlier nodes, so the list order is a valid
/// topological order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient of one output with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Derivative with respect to `v`; constants and later nodes give 0.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adjoints.get(v.idx).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.wrt(v)).collect()
    }
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

    /// Drops all recorded nodes.
    pub fn clear(&self) {
        let mut nodes = self.nodes.borrow_mut();
        nodes.clear();
        nodes.shrink_to_fit();
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Op::Input, usize::MAX, usize::MAX, value);
        Var { tape: Some(self), idx, val: value }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, op: Op, a: usize, b: usize, val: f64) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, a, b, val });
        nodes.len() - 1
    }

    /// Appends a node without any consistency checks. Only meant for
    /// exercising the malformed-tape path.
    #[doc(hidden)]
    pub fn push_raw(&self, op: Op, a: usize, b: usize, val: f64) -> usize {
        self.push(op, a, b, val)
    }

    /// Recorded value of node `idx`.
    pub fn value(&self, idx: usize) -> f64 {
        self.nodes.borrow()[idx].val
    }

    /// Reverse sweep from `output` with seed 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return Ok(Gradients { adjoints: adj });
        }
        adj[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let n = nodes[i];
            let unary = !matches!(n.op, Op::Input);
            let binary = matches!(n.op, Op::Add | Op::Sub | Op::Mul | Op::Div);
            if (unary && n.a >= i) || (binary && n.b >= i) {
                return Err(Error::CycleDetected {
                    node: i,
                    arg: if unary && n.a >= i { n.a } else { n.b },
                });
            }
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match n.op {
                Op::Input => {}
                Op::Add => {
                    adj[n.a] += g;
                    adj[n.b] += g;
                }
                Op::Sub => {
                    adj[n.a] += g;
                    adj[n.b] -= g;
                }
                Op::Mul => {
                    let (va, vb) = (nodes[n.a].val, nodes[n.b].val);
                    adj[n.a] += g * vb;
                    adj[n.b] += g * va;
                }
                Op::Div => {
                    let vb = nodes[n.b].val;
                    adj[n.a] += g / vb;
                    adj[n.b] -= g * n.val / vb;
                }
                Op::Neg | Op::RSub(_) => adj[n.a] -= g,
                Op::Affine { scale, .. } => adj[n.a] += g * scale,
                Op::DivConst(c) => adj[n.a] += g / c,
                Op::RDiv(_) => adj[n.a] -= g * n.val / nodes[n.a].val,
                Op::Sin => adj[n.a] += g * nodes[n.a].val.cos(),
                Op::Cos => adj[n.a] -= g * nodes[n.a].val.sin(),
                Op::Exp => adj[n.a] += g * n.val,
                Op::Ln => adj[n.a] += g / nodes[n.a].val,
                Op::Sqrt => adj[n.a] += g / (2.0 * n.val),
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Re-evaluates the recorded program with new values for the inputs
    /// (given in creation order). Returns every node's value.
    pub fn replay(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let mut vals = Vec::with_capacity(nodes.len());
        let mut next_input = 0;
        for (i, n) in nodes.iter().enumerate() {
            let arg = |k: usize| -> Result<f64> {
                if k >= i {
                    Err(Error::CycleDetected { node: i, arg: k })
                } else {
                    Ok(vals[k])
                }
            };
            let v = match n.op {
                Op::Input => {
                    let v = *inputs.get(next_input).ok_or(Error::DimensionMismatch {
                        expected: next_input + 1,
                        got: inputs.len(),
                    })?;
                    next_input += 1;
                    v
                }
                Op::Add => arg(n.a)? + arg(n.b)?,
                Op::Sub => arg(n.a)? - arg(n.b)?,
                Op::Mul => arg(n.a)? * arg(n.b)?,
                Op::Div => arg(n.a)? / arg(n.b)?,
                Op::Neg => -arg(n.a)?,
                Op::Affine { scale, shift } => affine(arg(n.a)?, scale, shift),
                Op::RSub(c) => c - arg(n.a)?,
                Op::DivConst(c) => arg(n.a)? / c,
                Op::RDiv(c) => c / arg(n.a)?,
                Op::Sin => arg(n.a)?.sin(),
                Op::Cos => arg(n.a)?.cos(),
                Op::Exp => arg(n.a)?.exp(),
                Op::Ln => arg(n.a)?.ln(),
                Op::Sqrt => arg(n.a)?.sqrt(),
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

fn affine(x: f64, scale: f64, shift: f64) -> f64 {
    if shift == 0.0 {
        x * scale
    } else if scale == 1.0 {
        x + shift
    } else {
        x * scale + shift
    }
}

/// Scalar handle into a [`Tape`], or a free-standing constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: usize,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var#{}({})", self.idx, self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var { tape: None, idx: usize::MAX, val: v }
    }

    pub fn val(&self) -> f64 {
        self.val
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx)
    }

    fn unary(self, op: Op, val: f64) -> Self {
        match self.tape {
            Some(t) => Var { tape: Some(t), idx: t.push(op, self.idx, usize::MAX, val), val },
            None => Var::constant(val),
        }
    }

    fn binary(self, rhs: Self, op: Op, val: f64) -> Self {
        match (self.tape, rhs.tape) {
            (Some(t), Some(u)) => {
                debug_assert!(std::ptr::eq(t, u), "mixing variables from different tapes");
                Var { tape: Some(t), idx: t.push(op, self.idx, rhs.idx, val), val }
            }
            (Some(_), None) => match op {
                Op::Add => self.unary(Op::Affine { scale: 1.0, shift: rhs.val }, val),
                Op::Sub => self.unary(Op::Affine { scale: 1.0, shift: -rhs.val }, val),
                Op::Mul => self.unary(Op::Affine { scale: rhs.val, shift: 0.0 }, val),
                Op::Div => self.unary(Op::DivConst(rhs.val), val),
                _ => unreachable!(),
            },
            (None, Some(_)) => match op {
                Op::Add => rhs.unary(Op::Affine { scale: 1.0, shift: self.val }, val),
                Op::Sub => rhs.unary(Op::RSub(self.val), val),
                Op::Mul => rhs.unary(Op::Affine { scale: self.val, shift: 0.0 }, val),
                Op::Div => rhs.unary(Op::RDiv(self.val), val),
                _ => unreachable!(),
            },
            (None, None) => Var::constant(val),
        }
    }

    pub fn affine(self, scale: f64, shift: f64) -> Self {
        self.unary(Op::Affine { scale, shift }, affine(self.val, scale, shift))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Div, self.val / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.val)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self + Var::constant(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self - Var::constant(rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self * Var::constant(rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self / Var::constant(rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin, self.val.sin())
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, self.val.cos())
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp, self.val.exp())
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, self.val.ln())
    }
    fn sqrt(self) -> Self {
        self.unary(Op::Sqrt, self.val.sqrt())
    }
}

/// Records `f` on a fresh tape and returns its value and gradient with
/// respect to `params`. The tape is dropped before returning.
pub fn gradient<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = tape.vars(params);
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok((out.val(), grads.wrt_all(&vars)))
}
