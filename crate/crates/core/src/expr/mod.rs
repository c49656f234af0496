//! Symbolic scalar expressions over the state variables.
//!
//! Every function the pipeline manipulates (dynamics, constraints, the softmax
//! barrier, Lyapunov candidates, verifier goals) is an [`Expr`]. Expressions
//! are immutable reference-counted trees; shared subtrees are shared by
//! pointer, which the compiled [`Tape`] turns into a DAG.
//!
//! The smart constructors ([`Expr::add`], [`Expr::mul`], ...) apply only local
//! rewrites: constant folding and the identities `e + 0 = e`, `0 * e = 0`,
//! `1 * e = e`, `e ^ 1 = e`. Nothing downstream depends on simplification.

mod parse;
mod tape;

use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use parse::parse;
pub use tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Var(usize),
    Const(f64),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, u32),
    Exp(Expr),
    Log(Expr),
    Sin(Expr),
    Cos(Expr),
    /// `(1/tau) * log(sum_i exp(tau * terms[i]))`, kept as one node so that
    /// point and interval evaluation can use the max-shifted form.
    LogSumExp { tau: f64, terms: Vec<Expr> },
}

#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || *self.0 == *other.0
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::constant(c)
    }
}

impl Expr {
    fn wrap(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn var(index: usize) -> Self {
        Self::wrap(Node::Var(index))
    }

    pub fn constant(c: f64) -> Self {
        Self::wrap(Node::Const(c))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn neg(&self) -> Self {
        match self.node() {
            Node::Const(c) => Self::constant(-c),
            Node::Neg(inner) => inner.clone(),
            _ => Self::wrap(Node::Neg(self.clone())),
        }
    }

    pub fn add(&self, rhs: &Expr) -> Self {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a + b),
            (Some(a), _) if a == 0.0 => rhs.clone(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Self::wrap(Node::Add(self.clone(), rhs.clone())),
        }
    }

    pub fn sub(&self, rhs: &Expr) -> Self {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a - b),
            (_, Some(b)) if b == 0.0 => self.clone(),
            (Some(a), _) if a == 0.0 => rhs.neg(),
            _ => Self::wrap(Node::Sub(self.clone(), rhs.clone())),
        }
    }

    pub fn mul(&self, rhs: &Expr) -> Self {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a * b),
            (Some(a), _) if a == 0.0 => Self::zero(),
            (_, Some(b)) if b == 0.0 => Self::zero(),
            (Some(a), _) if a == 1.0 => rhs.clone(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            (Some(a), _) if a == -1.0 => rhs.neg(),
            (_, Some(b)) if b == -1.0 => self.neg(),
            _ => Self::wrap(Node::Mul(self.clone(), rhs.clone())),
        }
    }

    pub fn div(&self, rhs: &Expr) -> Self {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Self::constant(a / b),
            (Some(a), _) if a == 0.0 => Self::zero(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            _ => Self::wrap(Node::Div(self.clone(), rhs.clone())),
        }
    }

    pub fn powi(&self, n: u32) -> Self {
        match (n, self.as_const()) {
            (0, _) => Self::one(),
            (1, _) => self.clone(),
            (_, Some(c)) => Self::constant(c.powi(n as i32)),
            _ => Self::wrap(Node::Pow(self.clone(), n)),
        }
    }

    pub fn exp(&self) -> Self {
        match self.as_const() {
            Some(c) => Self::constant(c.exp()),
            None => Self::wrap(Node::Exp(self.clone())),
        }
    }

    pub fn log(&self) -> Self {
        match self.as_const() {
            Some(c) if c > 0.0 => Self::constant(c.ln()),
            _ => Self::wrap(Node::Log(self.clone())),
        }
    }

    pub fn sin(&self) -> Self {
        match self.as_const() {
            Some(c) => Self::constant(c.sin()),
            None => Self::wrap(Node::Sin(self.clone())),
        }
    }

    pub fn cos(&self) -> Self {
        match self.as_const() {
            Some(c) => Self::constant(c.cos()),
            None => Self::wrap(Node::Cos(self.clone())),
        }
    }

    /// Smooth maximum `(1/tau) log sum exp(tau * t_i)`. A single term is
    /// returned unchanged.
    pub fn log_sum_exp(tau: f64, terms: Vec<Expr>) -> Self {
        assert!(tau > 0.0, "temperature must be positive");
        assert!(!terms.is_empty(), "log-sum-exp needs at least one term");
        if terms.len() == 1 {
            return terms.into_iter().next().unwrap();
        }
        Self::wrap(Node::LogSumExp { tau, terms })
    }

    pub fn sum<I: IntoIterator<Item = Expr>>(items: I) -> Self {
        items.into_iter().fold(Self::zero(), |acc, e| acc.add(&e))
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        let mut best = None;
        self.visit(&mut |n| {
            if let Node::Var(i) = n {
                best = Some(best.map_or(*i, |b: usize| b.max(*i)));
            }
        });
        best
    }

    fn visit(&self, f: &mut dyn FnMut(&Node)) {
        f(self.node());
        match self.node() {
            Node::Var(_) | Node::Const(_) => {}
            Node::Neg(a) | Node::Pow(a, _) | Node::Exp(a) | Node::Log(a) | Node::Sin(a) | Node::Cos(a) => {
                a.visit(f)
            }
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Node::LogSumExp { terms, .. } => terms.iter().for_each(|t| t.visit(f)),
        }
    }

    /// Exact partial derivative with respect to `var`.
    pub fn differentiate(&self, var: usize) -> Expr {
        let mut memo = HashMap::new();
        self.diff_memo(var, &mut memo)
    }

    fn diff_memo(&self, var: usize, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(d) = memo.get(&self.ptr_id()) {
            return d.clone();
        }
        let d = match self.node() {
            Node::Var(i) => {
                if *i == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Const(_) => Expr::zero(),
            Node::Neg(a) => a.diff_memo(var, memo).neg(),
            Node::Add(a, b) => a.diff_memo(var, memo).add(&b.diff_memo(var, memo)),
            Node::Sub(a, b) => a.diff_memo(var, memo).sub(&b.diff_memo(var, memo)),
            Node::Mul(a, b) => {
                let da = a.diff_memo(var, memo);
                let db = b.diff_memo(var, memo);
                da.mul(b).add(&a.mul(&db))
            }
            Node::Div(a, b) => {
                let da = a.diff_memo(var, memo);
                let db = b.diff_memo(var, memo);
                if db.is_zero() {
                    da.div(b)
                } else {
                    da.mul(b).sub(&a.mul(&db)).div(&b.powi(2))
                }
            }
            Node::Pow(a, n) => {
                let da = a.diff_memo(var, memo);
                Expr::constant(*n as f64).mul(&a.powi(n - 1)).mul(&da)
            }
            Node::Exp(a) => self.mul(&a.diff_memo(var, memo)),
            Node::Log(a) => a.diff_memo(var, memo).div(a),
            Node::Sin(a) => a.cos().mul(&a.diff_memo(var, memo)),
            Node::Cos(a) => a.sin().mul(&a.diff_memo(var, memo)).neg(),
            Node::LogSumExp { tau, terms } => {
                // d lse = sum_i softmax_i * d t_i, softmax_i = exp(tau (t_i - lse)).
                let tau_c = Expr::constant(*tau);
                Expr::sum(terms.iter().filter_map(|t| {
                    let dt = t.diff_memo(var, memo);
                    if dt.is_zero() {
                        None
                    } else {
                        Some(tau_c.mul(&t.sub(self)).exp().mul(&dt))
                    }
                }))
            }
        };
        memo.insert(self.ptr_id(), d.clone());
        d
    }

    pub fn gradient(&self, n: usize) -> Vec<Expr> {
        let mut memo = HashMap::new();
        (0..n)
            .map(|i| {
                memo.clear();
                self.diff_memo(i, &mut memo)
            })
            .collect()
    }

    /// Point evaluation in double precision.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(match self.node() {
            Node::Var(i) => *x
                .get(*i)
                .ok_or_else(|| Error::Domain(format!("variable x{} outside state of length {}", i + 1, x.len())))?,
            Node::Const(c) => *c,
            Node::Neg(a) => -a.eval(x)?,
            Node::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Node::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Node::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Node::Div(a, b) => {
                let d = b.eval(x)?;
                if d == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.eval(x)? / d
            }
            Node::Pow(a, n) => a.eval(x)?.powi(*n as i32),
            Node::Exp(a) => a.eval(x)?.exp(),
            Node::Log(a) => {
                let v = a.eval(x)?;
                if v <= 0.0 {
                    return Err(Error::Domain(format!("log of non-positive value {v}")));
                }
                v.ln()
            }
            Node::Sin(a) => a.eval(x)?.sin(),
            Node::Cos(a) => a.eval(x)?.cos(),
            Node::LogSumExp { tau, terms } => {
                let vals = terms.iter().map(|t| t.eval(x)).collect::<Result<Vec<_>>>()?;
                log_sum_exp(*tau, &vals)
            }
        })
    }
}

/// Max-shifted point evaluation of `(1/tau) log sum exp(tau a_i)`.
pub fn log_sum_exp(tau: f64, vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = vals.iter().map(|v| (tau * (v - m)).exp()).sum();
    m + s.ln() / tau
}

macro_rules! bin_op {
    ($tr:ident, $method:ident) => {
        impl ops::$tr<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$method(&self, &rhs)
            }
        }
        impl ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::$method(self, rhs)
            }
        }
        impl ops::$tr<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::$method(&self, &Expr::constant(rhs))
            }
        }
        impl ops::$tr<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$method(&Expr::constant(self), &rhs)
            }
        }
    };
}

bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(&self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

/// Control-affine dynamics `dx/dt = f(x) + g(x) u`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    n: usize,
    m: usize,
    f: Vec<Expr>,
    /// Row-major `n x m`.
    g: Vec<Vec<Expr>>,
}

impl VectorField {
    pub fn new(f: Vec<Expr>, g: Vec<Vec<Expr>>) -> Result<Self> {
        let n = f.len();
        if n == 0 {
            return Err(Error::InvalidProblem("empty drift".into()));
        }
        if g.len() != n {
            return Err(Error::InvalidProblem(format!("g has {} rows, expected {n}", g.len())));
        }
        let m = g[0].len();
        if m == 0 || g.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidProblem("g rows must share a positive column count".into()));
        }
        let vf = VectorField { n, m, f, g };
        for e in vf.f.iter().chain(vf.g.iter().flatten()) {
            if let Some(i) = e.max_var() {
                if i >= n {
                    return Err(Error::InvalidProblem(format!("x{} referenced in a {n}-state system", i + 1)));
                }
            }
        }
        let zero = vec![0.0; n];
        for (i, fi) in vf.f.iter().enumerate() {
            let v = fi.eval(&zero)?;
            if v.abs() > 1e-12 {
                return Err(Error::InvalidProblem(format!("f_{}(0) = {v} is not zero", i + 1)));
            }
        }
        Ok(vf)
    }

    pub fn dim_state(&self) -> usize {
        self.n
    }

    pub fn dim_input(&self) -> usize {
        self.m
    }

    pub fn drift(&self) -> &[Expr] {
        &self.f
    }

    pub fn input_matrix(&self) -> &[Vec<Expr>] {
        &self.g
    }

    /// Column `j` of `g`.
    pub fn input_column(&self, j: usize) -> Vec<Expr> {
        self.g.iter().map(|row| row[j].clone()).collect()
    }

    /// `f(x) + g(x) u`.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut v = self.f[i].eval(x)?;
            for j in 0..self.m {
                v += self.g[i][j].eval(x)? * u[j];
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Returns `(L_f s, [L_{g_j} s])`.
pub fn lie_derivatives(scalar: &Expr, vf: &VectorField) -> (Expr, Vec<Expr>) {
    let grad = scalar.gradient(vf.n);
    lie_from_gradient(&grad, vf)
}

pub fn lie_from_gradient(grad: &[Expr], vf: &VectorField) -> (Expr, Vec<Expr>) {
    let lf = Expr::sum(grad.iter().zip(&vf.f).map(|(d, f)| d.mul(f)));
    let lg = (0..vf.m)
        .map(|j| Expr::sum(grad.iter().zip(&vf.g).map(|(d, row)| d.mul(&row[j]))))
        .collect();
    (lf, lg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Expr {
        Expr::var(i)
    }

    fn central_diff(e: &Expr, p: &[f64], i: usize, h: f64) -> f64 {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[i] += h;
        b[i] -= h;
        (e.eval(&a).unwrap() - e.eval(&b).unwrap()) / (2.0 * h)
    }

    #[test]
    fn constant_rule() {
        assert_eq!(Expr::constant(3.5).differentiate(0), Expr::zero());
    }

    #[test]
    fn sin_rule() {
        assert_eq!(x(0).sin().differentiate(0), x(0).cos());
    }

    #[test]
    fn local_rewrites() {
        let e = x(0);
        assert_eq!(&e * &Expr::zero(), Expr::zero());
        assert_eq!(&e + &Expr::zero(), e);
        assert_eq!(Expr::constant(2.0) * Expr::constant(3.0), Expr::constant(6.0));
        assert_eq!(e.powi(1), e);
        assert_eq!(e.neg().neg(), e);
    }

    #[test]
    fn eval_basics() {
        let e = x(0) * x(1);
        assert_eq!(e.eval(&[3.0, 4.0]).unwrap(), 12.0);
        assert!(x(0).log().eval(&[-1.0]).is_err());
        assert!((x(0) / x(1)).eval(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_term_lse_is_identity() {
        let h = x(0).sin() + x(1);
        let s = Expr::log_sum_exp(4.5, vec![h.clone()]);
        assert_eq!(s.eval(&[0.3, 0.2]).unwrap(), h.eval(&[0.3, 0.2]).unwrap());
    }

    #[test]
    fn lse_gradient_matches_finite_differences() {
        let pi = std::f64::consts::PI;
        let h = vec![
            -x(0).sin() - x(0).cos() - x(1),
            1.0 + x(0) - pi,
            1.0 - x(0) - pi,
            1.0 + x(1) - 4.0,
            1.0 - x(1) - 3.0,
        ];
        let hsm = Expr::log_sum_exp(4.5, h);
        let p = [0.3, -0.5];
        for i in 0..2 {
            let d = hsm.differentiate(i).eval(&p).unwrap();
            let fd = central_diff(&hsm, &p, i, 1e-6);
            assert!((d - fd).abs() <= 1e-6 * d.abs().max(1e-3), "d{i}: {d} vs {fd}");
        }
    }

    #[test]
    fn lie_derivatives_of_quadratic() {
        // V = x1^2 + 2 x2^2 under f = [0, -sin x1], g = [1, -1]^T.
        let v = x(0).powi(2) + 2.0 * x(1).powi(2);
        let vf = VectorField::new(
            vec![Expr::zero(), -x(0).sin()],
            vec![vec![Expr::one()], vec![Expr::constant(-1.0)]],
        )
        .unwrap();
        let (lf, lg) = lie_derivatives(&v, &vf);
        for p in [[0.3f64, -0.7], [1.2, 2.0], [-2.5, 0.1]] {
            let want_lf = -4.0 * p[1] * p[0].sin();
            let want_lg = 2.0 * p[0] - 4.0 * p[1];
            assert!((lf.eval(&p).unwrap() - want_lf).abs() < 1e-12);
            assert!((lg[0].eval(&p).unwrap() - want_lg).abs() < 1e-12);
        }
        let (lf1, lg1) = lie_derivatives(&Expr::one(), &vf);
        assert!(lf1.is_zero() && lg1.iter().all(Expr::is_zero));
    }

    #[test]
    fn vector_field_rejects_nonzero_drift_at_origin() {
        let r = VectorField::new(vec![x(0) + 1.0], vec![vec![Expr::one()]]);
        assert!(r.is_err());
    }
}
