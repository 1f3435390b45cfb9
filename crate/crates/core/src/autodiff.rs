//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. A node
//! stores its value together with the local partial derivative with respect
//! to each parent, so the backward sweep is a single pass of
//! `adjoint[parent] += adjoint[node] * partial` in reverse insertion order.
//!
//! Model code is written once against the [`Real`] trait and runs either on
//! plain `f64` (value only) or on `Var` (value plus gradient). Both paths
//! evaluate the same floating-point expressions in the same order, so the
//! value returned by [`grad`] equals the plain evaluation bitwise.
//!
//! ```
//! use prom_core::autodiff::grad;
//!
//! let (value, gradient) = grad(|x| x[0] * x[0], &[3.0]).unwrap();
//! assert_eq!(value, 9.0);
//! assert_eq!(gradient, vec![6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

const LN_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {value} at tape node {node}")]
    NonFinite { node: usize, value: f64 },
    #[error("output variable belongs to a different tape")]
    ForeignOutput,
}

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    edge_end: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Wengert list of one evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Nodes>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_struct("Tape")
            .field("nodes", &nodes.values.len())
            .field("edges", &nodes.parents.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            nodes: RefCell::new(Nodes {
                values: Vec::with_capacity(nodes),
                edge_end: Vec::with_capacity(nodes),
                parents: Vec::with_capacity(edges),
                partials: Vec::with_capacity(edges),
            }),
        }
    }

    /// Drops all recorded nodes but keeps the allocations.
    pub fn clear(&mut self) {
        let nodes = self.nodes.get_mut();
        nodes.values.clear();
        nodes.edge_end.clear();
        nodes.parents.clear();
        nodes.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, &[])
    }

    /// Records a node whose local partials are supplied by the caller.
    ///
    /// This is how fused primitives are built: the caller computes the value
    /// and the derivative with respect to each input in closed form.
    pub fn custom<'t>(&'t self, value: f64, inputs: &[(Var<'t>, f64)]) -> Var<'t> {
        let mut nodes = self.nodes.borrow_mut();
        for (v, d) in inputs {
            debug_assert!(std::ptr::eq(v.tape, self));
            nodes.parents.push(v.idx);
            nodes.partials.push(*d);
        }
        let end = nodes.parents.len() as u32;
        nodes.edge_end.push(end);
        let idx = nodes.values.len() as u32;
        nodes.values.push(value);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    fn push<'t>(&'t self, value: f64, edges: &[(u32, f64)]) -> Var<'t> {
        let mut nodes = self.nodes.borrow_mut();
        for &(p, d) in edges {
            nodes.parents.push(p);
            nodes.partials.push(d);
        }
        let end = nodes.parents.len() as u32;
        nodes.edge_end.push(end);
        let idx = nodes.values.len() as u32;
        nodes.values.push(value);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    #[inline]
    fn unary<'t>(&'t self, x: Var<'t>, value: f64, d: f64) -> Var<'t> {
        self.push(value, &[(x.idx, d)])
    }

    #[inline]
    fn binary<'t>(&'t self, a: Var<'t>, b: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        self.push(value, &[(a.idx, da), (b.idx, db)])
    }

    /// Reverse sweep from `output`; returns adjoints of every node.
    pub fn adjoints(&self, output: Var<'_>) -> Result<Vec<f64>, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::ForeignOutput);
        }
        let nodes = self.nodes.borrow();
        if !output.val.is_finite() {
            // Report the first node that went bad, not the output.
            let node = nodes.values[..=output.idx as usize]
                .iter()
                .position(|v| !v.is_finite())
                .unwrap_or(output.idx as usize);
            return Err(AutodiffError::NonFinite {
                node,
                value: nodes.values[node],
            });
        }
        let n = output.idx as usize + 1;
        let mut adj = vec![0.0; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let start = if i == 0 {
                0
            } else {
                nodes.edge_end[i - 1] as usize
            };
            let end = nodes.edge_end[i] as usize;
            for e in start..end {
                adj[nodes.parents[e] as usize] += a * nodes.partials[e];
            }
        }
        Ok(adj)
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Evaluates `f` at `x` and returns the value with its gradient.
pub fn grad<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    grad_on(&tape, f, x)
}

/// Like [`grad`] but records onto a caller-owned tape, so the allocation can
/// be reused across evaluations. The tape must be empty.
pub fn grad_on<F>(tape: &Tape, f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    debug_assert!(tape.is_empty());
    let inputs: Vec<Var<'_>> = x.iter().map(|&v| tape.var(v)).collect();
    let out = f(&inputs);
    let adj = tape.adjoints(out)?;
    let g = inputs
        .iter()
        .map(|v| adj.get(v.index()).copied().unwrap_or(0.0))
        .collect();
    Ok((out.val, g))
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living on the same tape as `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    fn powf(self, p: f64) -> Self;
    /// Inverse logit.
    fn sigmoid(self) -> Self;
    /// `ln(sigmoid(x))`, stable for large |x|.
    fn log_sigmoid(self) -> Self;
    /// `ln(1 - exp(x))` for `x < 0`, floored at `ln(1e-300)`.
    fn log1m_exp(self) -> Self;
    /// `c - self`.
    fn rsub(self, c: f64) -> Self;
    /// Stable `ln(sum(exp(xs)))`. `xs` must be non-empty.
    fn log_sum_exp(xs: &[Self]) -> Self;
    /// `sum(xs)`. `xs` must be non-empty.
    fn sum(xs: &[Self]) -> Self;
    /// `sum(xs[i] * w[i])`. `xs` must be non-empty.
    fn dot(xs: &[Self], w: &[f64]) -> Self;
    /// Log density of `Normal(y | mu, sigma)` where the caller supplies
    /// `ln(sigma)` and `1/sigma` computed once per scale.
    fn normal_lpdf(y: f64, mu: Self, log_sigma: Self, inv_sigma: Self) -> Self;
    /// `y * ln(sigmoid(eta)) + (1 - y) * ln(sigmoid(-eta))`.
    fn bernoulli_logit_lpmf(y: bool, eta: Self) -> Self;
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn log1m_exp_f(x: f64) -> (f64, bool) {
    let m = -x.exp_m1();
    if m > LN_FLOOR {
        (m.ln(), false)
    } else {
        (LN_FLOOR.ln(), true)
    }
}

#[inline]
fn lse_f(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, c: f64) -> Self {
        c
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn square(self) -> Self {
        self * self
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f(self)
    }
    #[inline]
    fn log_sigmoid(self) -> Self {
        log_sigmoid_f(self)
    }
    #[inline]
    fn log1m_exp(self) -> Self {
        log1m_exp_f(self).0
    }
    #[inline]
    fn rsub(self, c: f64) -> Self {
        c - self
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        lse_f(xs)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(xs: &[Self], w: &[f64]) -> Self {
        xs.iter().zip(w).map(|(x, w)| x * w).sum()
    }
    #[inline]
    fn normal_lpdf(y: f64, mu: Self, log_sigma: Self, inv_sigma: Self) -> Self {
        let z = (y - mu) * inv_sigma;
        -0.5 * z * z - log_sigma - HALF_LN_2PI
    }
    #[inline]
    fn bernoulli_logit_lpmf(y: bool, eta: Self) -> Self {
        if y {
            log_sigmoid_f(eta)
        } else {
            log_sigmoid_f(-eta)
        }
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    #[inline]
    fn lift(self, c: f64) -> Self {
        self.tape.push(c, &[])
    }
    #[inline]
    fn exp(self) -> Self {
        let v = self.val.exp();
        self.tape.unary(self, v, v)
    }
    #[inline]
    fn ln(self) -> Self {
        self.tape.unary(self, self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        self.tape.unary(self, self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    #[inline]
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        self.tape.unary(self, v, 0.5 / v)
    }
    #[inline]
    fn square(self) -> Self {
        self.tape.unary(self, self.val * self.val, 2.0 * self.val)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        let v = self.val.powf(p);
        self.tape.unary(self, v, p * self.val.powf(p - 1.0))
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = sigmoid_f(self.val);
        self.tape.unary(self, s, s * (1.0 - s))
    }
    #[inline]
    fn log_sigmoid(self) -> Self {
        // d/dx ln σ(x) = σ(-x)
        self.tape
            .unary(self, log_sigmoid_f(self.val), sigmoid_f(-self.val))
    }
    #[inline]
    fn log1m_exp(self) -> Self {
        let (v, floored) = log1m_exp_f(self.val);
        // d/dx ln(1 - e^x) = -1 / (e^{-x} - 1) = 1 / expm1(-x) * (-1)
        let d = if floored {
            0.0
        } else {
            -1.0 / (-self.val).exp_m1()
        };
        self.tape.unary(self, v, d)
    }
    #[inline]
    fn rsub(self, c: f64) -> Self {
        self.tape.unary(self, c - self.val, -1.0)
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        let tape = xs[0].tape;
        let vals: Vec<f64> = xs.iter().map(|x| x.val).collect();
        let v = lse_f(&vals);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let edges: Vec<(u32, f64)> = if v.is_finite() {
            let terms: Vec<f64> = vals.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = terms.iter().sum();
            xs.iter().zip(terms).map(|(x, t)| (x.idx, t / s)).collect()
        } else {
            xs.iter().map(|x| (x.idx, 0.0)).collect()
        };
        tape.push(v, &edges)
    }
    fn sum(xs: &[Self]) -> Self {
        let tape = xs[0].tape;
        let v = xs.iter().map(|x| x.val).sum();
        let edges: Vec<(u32, f64)> = xs.iter().map(|x| (x.idx, 1.0)).collect();
        tape.push(v, &edges)
    }
    fn dot(xs: &[Self], w: &[f64]) -> Self {
        let tape = xs[0].tape;
        let v = xs.iter().zip(w).map(|(x, w)| x.val * w).sum();
        let edges: Vec<(u32, f64)> = xs.iter().zip(w).map(|(x, &w)| (x.idx, w)).collect();
        tape.push(v, &edges)
    }
    #[inline]
    fn normal_lpdf(y: f64, mu: Self, log_sigma: Self, inv_sigma: Self) -> Self {
        let z = (y - mu.val) * inv_sigma.val;
        let v = -0.5 * z * z - log_sigma.val - HALF_LN_2PI;
        // dz/dmu = -inv_sigma, dz/dinv_sigma = (y - mu)
        mu.tape.push(
            v,
            &[
                (mu.idx, z * inv_sigma.val),
                (log_sigma.idx, -1.0),
                (inv_sigma.idx, -z * (y - mu.val)),
            ],
        )
    }
    #[inline]
    fn bernoulli_logit_lpmf(y: bool, eta: Self) -> Self {
        if y {
            eta.tape
                .unary(eta, log_sigmoid_f(eta.val), sigmoid_f(-eta.val))
        } else {
            eta.tape
                .unary(eta, log_sigmoid_f(-eta.val), -sigmoid_f(eta.val))
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let v = self.val / rhs.val;
        self.tape.binary(self, rhs, v, inv, -v * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Self {
        self.tape.unary(self, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.unary(rhs, self + rhs.val, 1.0)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.unary(rhs, self - rhs.val, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.unary(rhs, self * rhs.val, self)
    }
}
