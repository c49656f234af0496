//! Outward-rounded interval arithmetic and axis-aligned boxes.
//!
//! Every primitive result is widened outward: by one ulp per endpoint for the
//! correctly rounded IEEE operations and by [`TRANSCENDENTAL_ULPS`] for the
//! libm functions, which are not assumed correctly rounded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Tape};

pub const TRANSCENDENTAL_ULPS: u32 = 2;

fn down(x: f64) -> f64 {
    if x.is_finite() {
        x.next_down()
    } else {
        x
    }
}

fn up(x: f64) -> f64 {
    if x.is_finite() {
        x.next_up()
    } else {
        x
    }
}

fn down_n(mut x: f64, n: u32) -> f64 {
    for _ in 0..n {
        x = down(x);
    }
    x
}

fn up_n(mut x: f64, n: u32) -> f64 {
    for _ in 0..n {
        x = up(x);
    }
    x
}

// 0 * inf is taken as 0, the limit convention for products of bounded sets.
fn mul_lo(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        down(a * b)
    }
}

fn mul_hi(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        up(a * b)
    }
}

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            write!(f, "[empty]")
        } else {
            write!(f, "[{:e}, {:e}]", self.lo, self.hi)
        }
    }
}

impl Interval {
    pub const EMPTY: Interval = Interval {
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
    };
    pub const ENTIRE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "interval bounds out of order: [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn width(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.hi - self.lo
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * self.lo + 0.5 * self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        self.is_empty() || (other.lo <= self.lo && self.hi <= other.hi)
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo > hi {
            Interval::EMPTY
        } else {
            Interval { lo, hi }
        }
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    fn sanitize(lo: f64, hi: f64) -> Interval {
        if lo.is_nan() || hi.is_nan() {
            Interval::ENTIRE
        } else {
            Interval { lo, hi }
        }
    }

    pub fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }

    pub fn add(self, o: Interval) -> Interval {
        Self::sanitize(down(self.lo + o.lo), up(self.hi + o.hi))
    }

    pub fn sub(self, o: Interval) -> Interval {
        Self::sanitize(down(self.lo - o.hi), up(self.hi - o.lo))
    }

    pub fn mul(self, o: Interval) -> Interval {
        let (a, b, c, d) = (self.lo, self.hi, o.lo, o.hi);
        let lo = mul_lo(a, c).min(mul_lo(a, d)).min(mul_lo(b, c)).min(mul_lo(b, d));
        let hi = mul_hi(a, c).max(mul_hi(a, d)).max(mul_hi(b, c)).max(mul_hi(b, d));
        Self::sanitize(lo, hi)
    }

    pub fn div(self, o: Interval) -> Result<Interval> {
        if o.contains(0.0) {
            return Err(Error::Domain(format!("denominator enclosure {o:?} contains zero")));
        }
        let (a, b, c, d) = (self.lo, self.hi, o.lo, o.hi);
        let q = [a / c, a / d, b / c, b / d];
        let lo = q.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::sanitize(down(lo), up(hi)))
    }

    /// Integer power by repeated squaring with upward rounding on magnitudes.
    pub fn powi(self, n: u32) -> Interval {
        if n == 0 {
            return Interval::point(1.0);
        }
        let mag_up = |x: f64| pow_mag(x.abs(), n, true);
        let mag_down = |x: f64| pow_mag(x.abs(), n, false);
        if n % 2 == 1 {
            let lo = if self.lo >= 0.0 { mag_down(self.lo) } else { -mag_up(self.lo) };
            let hi = if self.hi >= 0.0 { mag_up(self.hi) } else { -mag_down(self.hi) };
            Interval { lo, hi }
        } else if self.lo >= 0.0 {
            Interval {
                lo: mag_down(self.lo),
                hi: mag_up(self.hi),
            }
        } else if self.hi <= 0.0 {
            Interval {
                lo: mag_down(self.hi),
                hi: mag_up(self.lo),
            }
        } else {
            Interval {
                lo: 0.0,
                hi: mag_up(self.lo).max(mag_up(self.hi)),
            }
        }
    }

    pub fn exp(self) -> Interval {
        let lo = down_n(self.lo.exp(), TRANSCENDENTAL_ULPS).max(0.0);
        let hi = up_n(self.hi.exp(), TRANSCENDENTAL_ULPS);
        Interval { lo, hi }
    }

    pub fn ln(self) -> Result<Interval> {
        if self.lo <= 0.0 {
            return Err(Error::Domain(format!("log argument enclosure {self:?} is not positive")));
        }
        Ok(Interval {
            lo: down_n(self.lo.ln(), TRANSCENDENTAL_ULPS),
            hi: up_n(self.hi.ln(), TRANSCENDENTAL_ULPS),
        })
    }

    pub fn sin(self) -> Interval {
        // sin(x) = cos(x - pi/2); the shift is absorbed by the padding below.
        trig(self, true)
    }

    pub fn cos(self) -> Interval {
        trig(self, false)
    }

    /// Enclosure of `{a in within : a^n in self}`, the preimage used by the
    /// contractor.
    pub(crate) fn powi_preimage(self, n: u32, within: Interval) -> Interval {
        if n == 0 {
            return if self.contains(1.0) { within } else { Interval::EMPTY };
        }
        if self.is_empty() || within.is_empty() {
            return Interval::EMPTY;
        }
        // sqrt is correctly rounded; powf with an inexact 1/n exponent is
        // padded relatively, far beyond its worst-case error.
        let root = |v: f64| if n == 2 { v.abs().sqrt() } else { v.abs().powf(1.0 / n as f64) };
        let rel = if n == 2 { 0.0 } else { 1e-12 };
        let root_up = |v: f64| up(root(v) * (1.0 + rel));
        let root_down = |v: f64| down(root(v) * (1.0 - rel)).max(0.0);
        if n % 2 == 1 {
            let lo = if self.lo >= 0.0 { root_down(self.lo) } else { -root_up(self.lo) };
            let hi = if self.hi >= 0.0 { root_up(self.hi) } else { -root_down(self.hi) };
            return Self::sanitize(lo, hi).intersect(&within);
        }
        if self.hi < 0.0 {
            return Interval::EMPTY;
        }
        let m = root_up(self.hi);
        let l = if self.lo > 0.0 { root_down(self.lo) } else { 0.0 };
        let pos = Self::sanitize(l, m).intersect(&within);
        let neg = Self::sanitize(-m, -l).intersect(&within);
        pos.hull(&neg)
    }

    /// Enclosure of `{a : exp(a) in self}`.
    pub(crate) fn exp_preimage(self) -> Interval {
        if self.is_empty() || self.hi <= 0.0 {
            return Interval::EMPTY;
        }
        let lo = if self.lo <= 0.0 { f64::NEG_INFINITY } else { down_n(self.lo.ln(), TRANSCENDENTAL_ULPS) };
        Self::sanitize(lo, up_n(self.hi.ln(), TRANSCENDENTAL_ULPS))
    }

    /// Enclosure of `(1/tau) log sum exp(tau a_i)` from argument enclosures.
    /// The function is increasing in every argument, so the endpoint values
    /// bound it exactly up to rounding.
    pub fn log_sum_exp(tau: f64, args: &[Interval]) -> Interval {
        let los: Vec<f64> = args.iter().map(|a| a.lo).collect();
        let his: Vec<f64> = args.iter().map(|a| a.hi).collect();
        let lo = crate::expr::log_sum_exp(tau, &los);
        let hi = crate::expr::log_sum_exp(tau, &his);
        let scale = |v: &[f64]| v.iter().fold(1.0f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { m });
        let n = args.len() as f64;
        let slack = |v: &[f64]| (n + 16.0) * f64::EPSILON * (scale(v) + n.ln() / tau + 1.0);
        Self::sanitize(lo - slack(&los), hi + slack(&his))
    }
}

fn pow_mag(x: f64, n: u32, upward: bool) -> f64 {
    let step = |v: f64| if upward { up(v) } else { down(v).max(0.0) };
    let mut result = 1.0f64;
    let mut base = x;
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            result = step(result * base);
        }
        e >>= 1;
        if e > 0 {
            base = step(base * base);
        }
    }
    result
}

fn trig(x: Interval, is_sin: bool) -> Interval {
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    if !(x.lo.is_finite() && x.hi.is_finite()) || x.hi - x.lo >= TAU {
        return Interval::new(-1.0, 1.0);
    }
    let f = |v: f64| if is_sin { v.sin() } else { v.cos() };
    let (a, b) = (f(x.lo), f(x.hi));
    let mut lo = down_n(a.min(b), TRANSCENDENTAL_ULPS);
    let mut hi = up_n(a.max(b), TRANSCENDENTAL_ULPS);
    // Extremum locations: cos peaks at 2k pi, troughs at (2k+1) pi; sin is
    // cos shifted by pi/2. A small tolerance keeps borderline cases inclusive.
    let shift = if is_sin { FRAC_PI_2 } else { 0.0 };
    let tol = 1e-12 * (1.0 + x.lo.abs().max(x.hi.abs()));
    let contains_phase = |phase: f64| {
        let first = ((x.lo - shift - phase - tol) / TAU).ceil();
        first * TAU + shift + phase <= x.hi + tol
    };
    if contains_phase(0.0) {
        hi = 1.0;
    }
    if contains_phase(PI) {
        lo = -1.0;
    }
    Interval {
        lo: lo.max(-1.0),
        hi: hi.min(1.0),
    }
}

/// Axis-aligned box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox(Vec<Interval>);

impl IntervalBox {
    pub fn new(dims: Vec<Interval>) -> Self {
        IntervalBox(dims)
    }

    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Self {
        IntervalBox(lower.iter().zip(upper).map(|(&l, &u)| Interval::new(l, u)).collect())
    }

    pub fn dims(&self) -> &[Interval] {
        &self.0
    }

    pub(crate) fn dims_mut(&mut self) -> &mut [Interval] {
        &mut self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.0.iter().map(|i| i.lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.0.iter().map(|i| i.hi).collect()
    }

    pub fn width(&self) -> f64 {
        self.0.iter().map(Interval::width).fold(0.0, f64::max)
    }

    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for (i, iv) in self.0.iter().enumerate() {
            if iv.width() > self.0[best].width() {
                best = i;
            }
        }
        best
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.0.iter().map(Interval::mid).collect()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.0.len() && self.0.iter().zip(x).all(|(i, &v)| i.contains(v))
    }

    pub fn is_subset_of(&self, other: &IntervalBox) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.is_subset_of(b))
    }

    /// Appends extra coordinates (used for multiplier dimensions).
    pub fn extended(&self, extra: &[Interval]) -> IntervalBox {
        let mut dims = self.0.clone();
        dims.extend_from_slice(extra);
        IntervalBox(dims)
    }

    /// Bisects the widest dimension at its midpoint.
    pub fn split(&self) -> (IntervalBox, IntervalBox) {
        let k = self.widest_dim();
        let iv = self.0[k];
        let m = iv.mid();
        let mut left = self.0.clone();
        let mut right = self.0.clone();
        left[k] = Interval { lo: iv.lo, hi: m };
        right[k] = Interval { lo: m, hi: iv.hi };
        (IntervalBox(left), IntervalBox(right))
    }

    /// Largest value of `sum x_i^2` over the box, rounded up.
    pub fn max_norm_sq(&self) -> f64 {
        self.0
            .iter()
            .map(|i| i.powi(2).hi)
            .fold(0.0, |acc, v| up(acc + v))
    }
}

/// Sound enclosure of `e` over `b`.
pub fn eval_interval(e: &Expr, b: &IntervalBox) -> Result<Interval> {
    let tape = Tape::compile(std::slice::from_ref(e));
    Ok(tape.eval_interval(b.dims())?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use std::f64::consts::PI;

    #[test]
    fn even_power_straddling_zero() {
        let e = parse("x1^2").unwrap();
        let r = eval_interval(&e, &IntervalBox::from_bounds(&[-2.0], &[3.0])).unwrap();
        assert_eq!(r.lo(), 0.0);
        assert!(r.hi() >= 9.0 && r.hi() < 9.0 + 1e-12);
    }

    #[test]
    fn sine_on_half_period() {
        let r = Interval::new(0.0, PI).sin();
        assert!(r.lo() <= 0.0 && r.lo() > -1e-12);
        assert_eq!(r.hi(), 1.0);
        let r = Interval::new(0.1, 0.2).sin();
        assert!(r.lo() <= 0.1f64.sin() && r.hi() >= 0.2f64.sin() && r.hi() < 0.2);
        let r = Interval::new(3.0, 3.5).cos();
        assert_eq!(r.lo(), -1.0);
    }

    #[test]
    fn split_examples() {
        let b = IntervalBox::from_bounds(&[0.0, 0.0], &[4.0, 1.0]);
        let (l, r) = b.split();
        assert_eq!(l, IntervalBox::from_bounds(&[0.0, 0.0], &[2.0, 1.0]));
        assert_eq!(r, IntervalBox::from_bounds(&[2.0, 0.0], &[4.0, 1.0]));

        let b = IntervalBox::from_bounds(&[1.0, 0.0], &[1.0, 2.0]);
        assert_eq!(b.widest_dim(), 1);

        let mut b = IntervalBox::from_bounds(&[0.0], &[1.0]);
        for k in 1..=10 {
            b = b.split().0;
            assert_eq!(b.width(), 2f64.powi(-k));
        }
    }

    #[test]
    fn division_and_log_errors() {
        assert!(Interval::new(1.0, 2.0).div(Interval::new(-1.0, 1.0)).is_err());
        assert!(Interval::new(0.0, 2.0).ln().is_err());
        let q = Interval::new(1.0, 2.0).div(Interval::new(4.0, 8.0)).unwrap();
        assert!(q.lo() <= 0.125 && q.hi() >= 0.5);
    }

    #[test]
    fn product_with_unbounded_factor() {
        let r = Interval::point(0.0).mul(Interval::ENTIRE);
        assert_eq!((r.lo(), r.hi()), (0.0, 0.0));
        let r = Interval::new(-1.0, 2.0).mul(Interval::new(3.0, f64::INFINITY));
        assert_eq!((r.lo(), r.hi()), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn lse_enclosure_brackets_samples() {
        let args = [Interval::new(-1.0, 0.5), Interval::new(0.2, 0.3), Interval::new(-50.0, -40.0)];
        let r = Interval::log_sum_exp(4.5, &args);
        for &(a, b, c) in &[(-1.0, 0.2, -50.0), (0.5, 0.3, -40.0), (0.0, 0.25, -45.0)] {
            let v = crate::expr::log_sum_exp(4.5, &[a, b, c]);
            assert!(r.contains(v));
        }
    }

    #[test]
    fn empty_sentinel() {
        let e = Interval::new(0.0, 1.0).intersect(&Interval::new(2.0, 3.0));
        assert!(e.is_empty());
        assert_eq!(e, Interval::EMPTY);
    }
}
