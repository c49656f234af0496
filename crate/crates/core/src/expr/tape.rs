//! Flattened, hash-consed evaluation order for a set of expressions.
//!
//! Structurally identical subtrees map to one slot, so the softmax weights in
//! a barrier derivative share a single evaluation of the log-sum-exp node.

use std::collections::HashMap;

use super::{Expr, Node};
use crate::error::{Error, Result};
use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Var(usize),
    Const(f64),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, u32),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Lse(f64, Vec<usize>),
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Var(usize),
    Const(u64),
    Un(u8, usize),
    Bin(u8, usize, usize),
    Pow(usize, u32),
    Lse(u64, Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
}

struct Builder {
    ops: Vec<Op>,
    by_key: HashMap<Key, usize>,
    by_ptr: HashMap<usize, usize>,
}

impl Builder {
    fn intern(&mut self, key: Key, op: Op) -> usize {
        if let Some(&i) = self.by_key.get(&key) {
            return i;
        }
        let i = self.ops.len();
        self.ops.push(op);
        self.by_key.insert(key, i);
        i
    }

    fn add(&mut self, e: &Expr) -> usize {
        if let Some(&i) = self.by_ptr.get(&e.ptr_id()) {
            return i;
        }
        let idx = match e.node() {
            Node::Var(v) => self.intern(Key::Var(*v), Op::Var(*v)),
            Node::Const(c) => self.intern(Key::Const(c.to_bits()), Op::Const(*c)),
            Node::Neg(a) => {
                let a = self.add(a);
                self.intern(Key::Un(0, a), Op::Neg(a))
            }
            Node::Exp(a) => {
                let a = self.add(a);
                self.intern(Key::Un(1, a), Op::Exp(a))
            }
            Node::Log(a) => {
                let a = self.add(a);
                self.intern(Key::Un(2, a), Op::Log(a))
            }
            Node::Sin(a) => {
                let a = self.add(a);
                self.intern(Key::Un(3, a), Op::Sin(a))
            }
            Node::Cos(a) => {
                let a = self.add(a);
                self.intern(Key::Un(4, a), Op::Cos(a))
            }
            Node::Pow(a, n) => {
                let a = self.add(a);
                self.intern(Key::Pow(a, *n), Op::Pow(a, *n))
            }
            Node::Add(a, b) => {
                let (a, b) = (self.add(a), self.add(b));
                self.intern(Key::Bin(0, a, b), Op::Add(a, b))
            }
            Node::Sub(a, b) => {
                let (a, b) = (self.add(a), self.add(b));
                self.intern(Key::Bin(1, a, b), Op::Sub(a, b))
            }
            Node::Mul(a, b) => {
                let (a, b) = (self.add(a), self.add(b));
                self.intern(Key::Bin(2, a, b), Op::Mul(a, b))
            }
            Node::Div(a, b) => {
                let (a, b) = (self.add(a), self.add(b));
                self.intern(Key::Bin(3, a, b), Op::Div(a, b))
            }
            Node::LogSumExp { tau, terms } => {
                let ids: Vec<usize> = terms.iter().map(|t| self.add(t)).collect();
                self.intern(Key::Lse(tau.to_bits(), ids.clone()), Op::Lse(*tau, ids))
            }
        };
        self.by_ptr.insert(e.ptr_id(), idx);
        idx
    }
}

impl Tape {
    pub fn compile(exprs: &[Expr]) -> Tape {
        let mut b = Builder {
            ops: Vec::new(),
            by_key: HashMap::new(),
            by_ptr: HashMap::new(),
        };
        let outputs = exprs.iter().map(|e| b.add(e)).collect();
        Tape { ops: b.ops, outputs }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Point values of every output.
    pub fn eval_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut slots = Vec::with_capacity(self.ops.len());
        self.eval_point_into(x, &mut slots)?;
        Ok(self.outputs.iter().map(|&i| slots[i]).collect())
    }

    pub(crate) fn eval_point_into(&self, x: &[f64], v: &mut Vec<f64>) -> Result<()> {
        v.clear();
        for op in &self.ops {
            let r = match *op {
                Op::Var(i) => *x
                    .get(i)
                    .ok_or_else(|| Error::Domain(format!("variable x{} outside point of length {}", i + 1, x.len())))?,
                Op::Const(c) => c,
                Op::Neg(a) => -v[a],
                Op::Add(a, b) => v[a] + v[b],
                Op::Sub(a, b) => v[a] - v[b],
                Op::Mul(a, b) => v[a] * v[b],
                Op::Div(a, b) => {
                    if v[b] == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    v[a] / v[b]
                }
                Op::Pow(a, n) => v[a].powi(n as i32),
                Op::Exp(a) => v[a].exp(),
                Op::Log(a) => {
                    if v[a] <= 0.0 {
                        return Err(Error::Domain(format!("log of non-positive value {}", v[a])));
                    }
                    v[a].ln()
                }
                Op::Sin(a) => v[a].sin(),
                Op::Cos(a) => v[a].cos(),
                Op::Lse(tau, ref ids) => {
                    let vals: Vec<f64> = ids.iter().map(|&i| v[i]).collect();
                    super::log_sum_exp(tau, &vals)
                }
            };
            v.push(r);
        }
        Ok(())
    }

    /// Enclosures of every output over the box `dims`.
    pub fn eval_interval(&self, dims: &[Interval]) -> Result<Vec<Interval>> {
        let mut slots = Vec::with_capacity(self.ops.len());
        self.eval_interval_into(dims, &mut slots)?;
        Ok(self.outputs.iter().map(|&i| slots[i]).collect())
    }

    pub(crate) fn eval_interval_into(&self, dims: &[Interval], v: &mut Vec<Interval>) -> Result<()> {
        v.clear();
        for op in &self.ops {
            let r = match *op {
                Op::Var(i) => *dims
                    .get(i)
                    .ok_or_else(|| Error::Domain(format!("variable x{} outside box of dimension {}", i + 1, dims.len())))?,
                Op::Const(c) => Interval::point(c),
                Op::Neg(a) => v[a].neg(),
                Op::Add(a, b) => v[a].add(v[b]),
                Op::Sub(a, b) => v[a].sub(v[b]),
                Op::Mul(a, b) => {
                    if a == b {
                        v[a].powi(2)
                    } else {
                        v[a].mul(v[b])
                    }
                }
                Op::Div(a, b) => v[a].div(v[b])?,
                Op::Pow(a, n) => v[a].powi(n),
                Op::Exp(a) => v[a].exp(),
                Op::Log(a) => v[a].ln()?,
                Op::Sin(a) => v[a].sin(),
                Op::Cos(a) => v[a].cos(),
                Op::Lse(tau, ref ids) => {
                    let args: Vec<Interval> = ids.iter().map(|&i| v[i]).collect();
                    Interval::log_sum_exp(tau, &args)
                }
            };
            v.push(r);
        }
        Ok(())
    }
    /// Forward-backward (HC4) contraction of `dims` against the requirement
    /// that output `k` lies in `ranges[k]`. Returns `false` when the box is
    /// proven to contain no such point. Only points violating the exact
    /// requirements are removed.
    pub fn contract(&self, dims: &mut [Interval], ranges: &[Interval], v: &mut Vec<Interval>) -> Result<bool> {
        self.eval_interval_into(dims, v)?;
        for (&o, r) in self.outputs.iter().zip(ranges) {
            v[o] = v[o].intersect(r);
            if v[o].is_empty() {
                return Ok(false);
            }
        }
        fn narrow(v: &mut [Interval], i: usize, by: Interval) -> bool {
            v[i] = v[i].intersect(&by);
            !v[i].is_empty()
        }
        for k in (0..self.ops.len()).rev() {
            let r = v[k];
            let ok = match self.ops[k] {
                Op::Var(i) => {
                    dims[i] = dims[i].intersect(&r);
                    !dims[i].is_empty()
                }
                Op::Const(_) | Op::Sin(_) | Op::Cos(_) => true,
                Op::Neg(a) => narrow(v, a, r.neg()),
                Op::Add(a, b) => {
                    let ra = r.sub(v[b]);
                    narrow(v, a, ra) && {
                        let rb = r.sub(v[a]);
                        narrow(v, b, rb)
                    }
                }
                Op::Sub(a, b) => {
                    let ra = r.add(v[b]);
                    narrow(v, a, ra) && {
                        let rb = v[a].sub(r);
                        narrow(v, b, rb)
                    }
                }
                Op::Mul(a, b) if a == b => {
                    let pre = r.powi_preimage(2, v[a]);
                    narrow(v, a, pre)
                }
                Op::Mul(a, b) => {
                    let ok = v[b].contains(0.0) || {
                        let ra = r.div(v[b])?;
                        narrow(v, a, ra)
                    };
                    ok && (v[a].contains(0.0) || {
                        let rb = r.div(v[a])?;
                        narrow(v, b, rb)
                    })
                }
                Op::Div(a, b) => {
                    let ra = r.mul(v[b]);
                    narrow(v, a, ra)
                        && (r.contains(0.0) || {
                            let rb = v[a].div(r)?;
                            narrow(v, b, rb)
                        })
                }
                Op::Pow(a, n) => {
                    let pre = r.powi_preimage(n, v[a]);
                    narrow(v, a, pre)
                }
                Op::Exp(a) => narrow(v, a, r.exp_preimage()),
                Op::Log(a) => narrow(v, a, r.exp()),
                // log-sum-exp dominates each of its arguments.
                Op::Lse(_, ref ids) => {
                    let cap = Interval::new(f64::NEG_INFINITY, r.hi());
                    ids.iter().all(|&i| narrow(v, i, cap))
                }
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn shares_identical_subtrees() {
        let a = parse("sin(x1) * x2").unwrap();
        let b = parse("sin(x1) * x2 + 1").unwrap();
        let t = Tape::compile(&[a, b]);
        // x1, sin, x2, mul, 1, add
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn contraction_narrows_to_the_constraint() {
        // x1^2 + x2 = 1 with x2 in [0.75, 1] forces |x1| <= 0.5.
        let t = Tape::compile(&[parse("x1^2 + x2").unwrap()]);
        let mut dims = [Interval::new(-3.0, 3.0), Interval::new(0.75, 1.0)];
        let mut buf = Vec::new();
        assert!(t.contract(&mut dims, &[Interval::point(1.0)], &mut buf).unwrap());
        assert!(dims[0].lo() >= -0.5000001 && dims[0].hi() <= 0.5000001);
        assert!(dims[0].contains(0.5) && dims[0].contains(-0.5));

        let mut dims = [Interval::new(-3.0, 3.0), Interval::new(1.5, 2.0)];
        assert!(!t.contract(&mut dims, &[Interval::point(1.0)], &mut buf).unwrap());
    }

    #[test]
    fn contraction_keeps_every_solution() {
        let t = Tape::compile(&[parse("x1 * x2 - exp(x1) / (2 + x2)").unwrap()]);
        let mut buf = Vec::new();
        for k in 0..200 {
            let x = [-2.0 + 0.02 * k as f64, 1.0 - 0.007 * k as f64];
            let val = t.eval_point(&x).unwrap()[0];
            let mut dims = [Interval::new(-2.5, 2.5), Interval::new(-0.5, 1.5)];
            assert!(t.contract(&mut dims, &[Interval::new(val - 1e-12, val + 1e-12)], &mut buf).unwrap());
            assert!(dims[0].contains(x[0]) && dims[1].contains(x[1]), "{x:?} lost: {dims:?}");
        }
    }

    #[test]
    fn matches_tree_evaluation() {
        let e = parse("logsumexp(3, x1^2 - x2, exp(x2) / (1 + x1^2), cos(x1 * x2))").unwrap();
        let d = e.differentiate(0);
        let t = Tape::compile(&[e.clone(), d.clone()]);
        let p = [0.4, -1.3];
        let out = t.eval_point(&p).unwrap();
        assert_eq!(out[0], e.eval(&p).unwrap());
        assert!((out[1] - d.eval(&p).unwrap()).abs() < 1e-14);
    }
}
