//! Infix syntax for expressions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)?
//! atom    := number | 'pi' | 'x'k | func '(' sum ')' | 'logsumexp' '(' number (',' sum)+ ')' | '(' sum ')'
//! ```
//!
//! Variables are 1-based in text (`x1` is index 0). A unary minus applied
//! directly to a numeric literal yields a negative constant, which keeps
//! `parse(print(e)) == e` for expressions built with the smart constructors.

use std::fmt;

use super::{Expr, Node};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                pos: start,
                msg: format!("bad number '{text}'"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return Err(Error::Parse {
                pos: i,
                msg: format!("unexpected character '{c}'"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.here(),
            msg: msg.into(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{c}'"))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = lhs.add(&self.product()?);
            } else if self.eat('-') {
                lhs = lhs.sub(&self.product()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = lhs.mul(&self.unary()?);
            } else if self.eat('/') {
                lhs = lhs.div(&self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            if let Some(Tok::Num(v)) = self.peek() {
                let v = *v;
                if self.toks.get(self.pos + 1).map(|(_, t)| t) != Some(&Tok::Op('^')) {
                    self.pos += 1;
                    return Ok(Expr::constant(-v));
                }
            }
            return Ok(self.unary()?.neg());
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            match self.peek() {
                Some(Tok::Num(v)) if v.fract() == 0.0 && *v >= 0.0 && *v <= u32::MAX as f64 => {
                    let n = *v as u32;
                    self.pos += 1;
                    Ok(base.powi(n))
                }
                _ => self.err("exponent must be a non-negative integer literal"),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return self.err("unexpected end of input"),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::constant(v)),
            Tok::Op('(') => {
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => self.ident(&name),
            Tok::Op(c) => {
                self.pos -= 1;
                self.err(format!("unexpected '{c}'"))
            }
        }
    }

    fn ident(&mut self, name: &str) -> Result<Expr> {
        if name == "pi" {
            return Ok(Expr::constant(std::f64::consts::PI));
        }
        if let Some(k) = name.strip_prefix('x') {
            if let Ok(k) = k.parse::<usize>() {
                if k == 0 {
                    self.pos -= 1;
                    return self.err("variables are numbered from x1");
                }
                return Ok(Expr::var(k - 1));
            }
        }
        if name == "logsumexp" {
            self.expect('(')?;
            let tau = match self.peek() {
                Some(Tok::Num(v)) if *v > 0.0 => *v,
                _ => return self.err("logsumexp needs a positive temperature literal first"),
            };
            self.pos += 1;
            let mut terms = Vec::new();
            while self.eat(',') {
                terms.push(self.sum()?);
            }
            self.expect(')')?;
            if terms.len() < 2 {
                return self.err("logsumexp needs at least two terms");
            }
            return Ok(Expr::log_sum_exp(tau, terms));
        }
        let f: fn(&Expr) -> Expr = match name {
            "exp" => Expr::exp,
            "log" => Expr::log,
            "sin" => Expr::sin,
            "cos" => Expr::cos,
            _ => {
                self.pos -= 1;
                return self.err(format!("unknown identifier '{name}'"));
            }
        };
        self.expect('(')?;
        let arg = self.sum()?;
        self.expect(')')?;
        Ok(f(&arg))
    }
}

/// Parses an infix expression such as `-sin(x1) - cos(x1) - x2`.
pub fn parse(src: &str) -> Result<Expr> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        end: src.len(),
    };
    let e = p.sum()?;
    if p.pos != toks.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

// Binding strength used by the printer.
const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_ATOM: u8 = 5;

fn prec(e: &Expr) -> u8 {
    match e.node() {
        Node::Add(..) | Node::Sub(..) => PREC_SUM,
        Node::Mul(..) | Node::Div(..) => PREC_PRODUCT,
        Node::Neg(_) => PREC_UNARY,
        Node::Const(c) if c.is_sign_negative() => PREC_UNARY,
        Node::Pow(..) => 4,
        _ => PREC_ATOM,
    }
}

fn write_num(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        write!(f, "{c}")
    } else {
        write!(f, "{c:?}")
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if prec(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bin = |f: &mut fmt::Formatter<'_>, a: &Expr, op: &str, b: &Expr, p: u8| {
            write_child(f, a, p)?;
            write!(f, " {op} ")?;
            write_child(f, b, p + 1)
        };
        match self.node() {
            Node::Var(i) => write!(f, "x{}", i + 1),
            Node::Const(c) => write_num(f, *c),
            Node::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 4)
            }
            Node::Add(a, b) => bin(f, a, "+", b, PREC_SUM),
            Node::Sub(a, b) => bin(f, a, "-", b, PREC_SUM),
            Node::Mul(a, b) => bin(f, a, "*", b, PREC_PRODUCT),
            Node::Div(a, b) => bin(f, a, "/", b, PREC_PRODUCT),
            Node::Pow(a, n) => {
                write_child(f, a, PREC_ATOM)?;
                write!(f, "^{n}")
            }
            Node::Exp(a) => write!(f, "exp({a})"),
            Node::Log(a) => write!(f, "log({a})"),
            Node::Sin(a) => write!(f, "sin({a})"),
            Node::Cos(a) => write!(f, "cos({a})"),
            Node::LogSumExp { tau, terms } => {
                write!(f, "logsumexp(")?;
                write_num(f, *tau)?;
                for t in terms {
                    write!(f, ", {t}")?;
                }
                write!(f, ")")
            }
        }
    }
}
