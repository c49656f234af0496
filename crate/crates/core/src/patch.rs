//! Patching a compatible (h, V) pair into one control Lyapunov-barrier
//! function
//!
//! ```text
//! W = (1 - b) V2 + b h,   V2 = alpha V,   alpha = (1 - eps) / max_C V
//! ```
//!
//! where the C^1 bump `b` is 0 for `h <= 1 - eps`, 1 for `h >= 1` and
//! `exp(-1/(eps^2 - (h-1)^2) + 1/eps^2)` in between. W is kept region-wise
//! because the bump formula is meaningless outside its band.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Tape};
use crate::interval::{Interval, IntervalBox};

/// Band points with `eps^2 - (h-1)^2` below this use the limit clause.
pub const BAND_DENOM_FLOOR: f64 = 1e-12;
/// Relative optimality gap of the bound on `max_C V`.
pub const ALPHA_GAP: f64 = 0.01;
const ALPHA_BUDGET: u64 = 2_000_000;
const ALPHA_MIN_WIDTH: f64 = 1e-9;

fn band_denominator(h: f64, eps: f64) -> f64 {
    eps * eps - (h - 1.0) * (h - 1.0)
}

/// The bump as a function of the barrier value.
pub fn bump(h: f64, eps: f64) -> f64 {
    if h >= 1.0 {
        return 1.0;
    }
    if h <= 1.0 - eps {
        return 0.0;
    }
    let d = band_denominator(h, eps);
    if d < BAND_DENOM_FLOOR {
        return 0.0;
    }
    (-1.0 / d + 1.0 / (eps * eps)).exp()
}

/// `db/dh`, i.e. the factor `p` with `grad b = p grad h`.
pub fn bump_slope(h: f64, eps: f64) -> f64 {
    if h >= 1.0 || h <= 1.0 - eps {
        return 0.0;
    }
    let d = band_denominator(h, eps);
    if d < BAND_DENOM_FLOOR {
        return 0.0;
    }
    bump(h, eps) * 2.0 * (1.0 - h) / (d * d)
}

/// The band formula of the bump over an expression `h`.
pub fn bump_expr(h: &Expr, eps: f64) -> Expr {
    let shifted = h.sub(&Expr::one());
    let d = Expr::constant(eps * eps).sub(&shifted.powi(2));
    Expr::constant(-1.0).div(&d).add(&Expr::constant(1.0 / (eps * eps))).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// `h <= 1 - eps`: W = alpha V.
    Inner,
    /// `1 - eps < h < 1`: blended.
    Band,
    /// `h >= 1`: W = h.
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBound {
    pub alpha: f64,
    /// Verified upper bound on V over `{h <= 1}`.
    pub v_upper: f64,
    /// Best value of V found at a point of the safe set.
    pub v_lower: f64,
    pub boxes: u64,
}

struct Node {
    upper: f64,
    seq: u64,
    b: IntervalBox,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Node {
    // Largest upper bound first; earlier insertion wins ties.
    fn cmp(&self, o: &Self) -> Ordering {
        self.upper.total_cmp(&o.upper).then(o.seq.cmp(&self.seq))
    }
}

/// `alpha = (1 - eps) / U` with U a verified upper bound on `max V` over
/// `{x in box : h(x) <= 1}`, found by best-first interval branch and bound.
pub fn compute_alpha(v: &Expr, h: &Expr, domain: &IntervalBox, eps: f64) -> Result<AlphaBound> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidProblem(format!("band width must lie in (0, 1), got {eps}")));
    }
    let tape = Tape::compile(&[h.clone(), v.clone()]);
    let mut buf = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut lower = f64::NEG_INFINITY;
    // Upper bounds of boxes retired at the minimum width.
    let mut settled = f64::NEG_INFINITY;
    let mut boxes = 0u64;

    let mut push = |b: IntervalBox, lower: &mut f64, heap: &mut BinaryHeap<Node>, boxes: &mut u64| -> Result<()> {
        *boxes += 1;
        let mut b = b;
        let ranges = [Interval::new(f64::NEG_INFINITY, 1.0), Interval::new(lower.max(f64::MIN), f64::INFINITY)];
        if !tape.contract(b.dims_mut(), &ranges, &mut buf)? {
            return Ok(());
        }
        let encl = tape.eval_interval(b.dims())?;
        let mid = b.midpoint();
        let vals = tape.eval_point(&mid)?;
        if vals[0] <= 1.0 && vals[1] > *lower {
            *lower = vals[1];
        }
        seq += 1;
        heap.push(Node {
            upper: encl[1].hi(),
            seq,
            b,
        });
        Ok(())
    };
    push(domain.clone(), &mut lower, &mut heap, &mut boxes)?;

    while let Some(top) = heap.pop() {
        let upper = top.upper.max(settled);
        if lower > f64::NEG_INFINITY && upper - lower <= ALPHA_GAP * upper.abs() {
            return finish(eps, upper, lower, boxes);
        }
        if top.upper < lower {
            continue;
        }
        if boxes > ALPHA_BUDGET {
            return Err(Error::ResourceExhausted {
                boxes,
                reason: "bounding max V over the safe set".into(),
            });
        }
        if top.b.width() <= ALPHA_MIN_WIDTH {
            settled = settled.max(top.upper);
            continue;
        }
        let (l, r) = top.b.split();
        push(l, &mut lower, &mut heap, &mut boxes)?;
        push(r, &mut lower, &mut heap, &mut boxes)?;
    }
    if lower == f64::NEG_INFINITY {
        return Err(Error::EmptySafeSet);
    }
    finish(eps, settled.max(lower), lower, boxes)
}

fn finish(eps: f64, upper: f64, lower: f64, boxes: u64) -> Result<AlphaBound> {
    if !(upper > 0.0) {
        return Err(Error::InvalidProblem(format!("V is not positive on the safe set (max bound {upper})")));
    }
    Ok(AlphaBound {
        alpha: (1.0 - eps) / upper,
        v_upper: upper,
        v_lower: lower,
        boxes,
    })
}

/// Point data of W: value, gradient and region.
#[derive(Debug, Clone, PartialEq)]
pub struct WPoint {
    pub region: Region,
    pub w: f64,
    pub grad: Vec<f64>,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct PatchedClbf {
    h: Expr,
    v: Expr,
    alpha: f64,
    epsilon: f64,
    v2: Expr,
    w_band: Expr,
    /// `[h, V, dh/dx.., dV/dx..]`.
    tape: Tape,
    n: usize,
}

pub fn build_patched(h: &Expr, v: &Expr, eps: f64, alpha: f64, n: usize) -> Result<PatchedClbf> {
    if !(eps > 0.0 && eps < 1.0) || !(alpha > 0.0) {
        return Err(Error::InvalidProblem(format!("bad patch parameters eps={eps}, alpha={alpha}")));
    }
    let h0 = h.eval(&vec![0.0; n])?;
    if !(h0 < 1.0 - eps) {
        return Err(Error::InvalidProblem(format!(
            "origin lies in the band: h(0) = {h0} is not below 1 - eps = {}",
            1.0 - eps
        )));
    }
    let v2 = Expr::constant(alpha).mul(v);
    let b = bump_expr(h, eps);
    let w_band = Expr::one().sub(&b).mul(&v2).add(&b.mul(h));
    let mut outs = vec![h.clone(), v.clone()];
    outs.extend(h.gradient(n));
    outs.extend(v.gradient(n));
    Ok(PatchedClbf {
        h: h.clone(),
        v: v.clone(),
        alpha,
        epsilon: eps,
        v2,
        w_band,
        tape: Tape::compile(&outs),
        n,
    })
}

impl PatchedClbf {
    pub fn h(&self) -> &Expr {
        &self.h
    }

    pub fn v(&self) -> &Expr {
        &self.v
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `alpha V`, the formula on the inner region.
    pub fn v2(&self) -> &Expr {
        &self.v2
    }

    /// The blended formula, valid on the open band only.
    pub fn w_band(&self) -> &Expr {
        &self.w_band
    }

    /// The expression W equals on `region`.
    pub fn region_expr(&self, region: Region) -> &Expr {
        match region {
            Region::Inner => &self.v2,
            Region::Band => &self.w_band,
            Region::Outer => &self.h,
        }
    }

    pub fn region_of(&self, h: f64) -> Region {
        if h >= 1.0 {
            Region::Outer
        } else if h <= 1.0 - self.epsilon || band_denominator(h, self.epsilon) < BAND_DENOM_FLOOR {
            Region::Inner
        } else {
            Region::Band
        }
    }

    /// W and its gradient, the latter by the product rule
    /// `b grad h + (1 - b) grad V2 + (h - V2) p grad h`.
    pub fn point(&self, x: &[f64]) -> Result<WPoint> {
        let vals = self.tape.eval_point(x)?;
        let n = self.n;
        let (h, v) = (vals[0], vals[1]);
        let gh = &vals[2..2 + n];
        let gv = &vals[2 + n..2 + 2 * n];
        let v2 = self.alpha * v;
        let region = self.region_of(h);
        let (w, grad) = match region {
            Region::Inner => (v2, gv.iter().map(|g| self.alpha * g).collect()),
            Region::Outer => (h, gh.to_vec()),
            Region::Band => {
                let b = bump(h, self.epsilon);
                let p = bump_slope(h, self.epsilon);
                let grad = gh
                    .iter()
                    .zip(gv)
                    .map(|(dh, dv)| b * dh + (1.0 - b) * self.alpha * dv + (h - v2) * p * dh)
                    .collect();
                ((1.0 - b) * v2 + b * h, grad)
            }
        };
        Ok(WPoint { region, w, grad, h })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.point(x)?.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn bump_endpoints_and_midpoint() {
        let eps = 0.3;
        assert_eq!(bump(1.0, eps), 1.0);
        assert_eq!(bump(1.0 - eps, eps), 0.0);
        assert!((bump(1.0 - 1e-12, eps) - 1.0).abs() < 1e-9);
        assert!(bump(1.0 - eps + 1e-9, eps) < 1e-100);
        let mid = bump(1.0 - eps / 2.0, eps);
        assert!((mid - (-1.0 / (3.0 * eps * eps)).exp()).abs() < 1e-15);
        let e = bump_expr(&Expr::var(0), eps);
        assert!((e.eval(&[1.0 - eps / 2.0]).unwrap() - mid).abs() < 1e-15);
    }

    #[test]
    fn bump_slope_matches_finite_differences_and_is_continuous() {
        let eps = 0.4;
        let step = 1e-6;
        for k in 1..40 {
            let h = 1.0 - eps + eps * k as f64 / 40.0;
            let fd = (bump(h + step, eps) - bump(h - step, eps)) / (2.0 * step);
            let p = bump_slope(h, eps);
            assert!((fd - p).abs() <= 1e-5 * p.abs().max(1.0), "h={h}: {fd} vs {p}");
        }
        for edge in [1.0 - eps, 1.0] {
            for side in [-1.0, 1.0] {
                let h = edge + side * 1e-6;
                let fd = (bump(h + 1e-7, eps) - bump(h - 1e-7, eps)) / 2e-7;
                assert!(fd.abs() <= 1e-3, "slope {fd} near {edge}");
            }
        }
    }

    #[test]
    fn alpha_for_the_unit_disk() {
        let domain = IntervalBox::from_bounds(&[-2.0, -2.0], &[2.0, 2.0]);
        let v = parse("x1^2 + x2^2").unwrap();
        let h = parse("x1^2 + x2^2").unwrap();
        let a = compute_alpha(&v, &h, &domain, 0.5).unwrap();
        assert!(a.v_upper >= 1.0 && a.v_upper <= 1.0 / (1.0 - ALPHA_GAP), "{a:?}");
        assert!(a.alpha >= 0.49 && a.alpha <= 0.5);

        let scaled = parse("3*(x1^2 + x2^2)").unwrap();
        let b = compute_alpha(&scaled, &h, &domain, 0.5).unwrap();
        assert!((b.alpha * 3.0 - a.alpha).abs() <= 0.011 * a.alpha);
    }

    #[test]
    fn empty_safe_set_is_reported() {
        let domain = IntervalBox::from_bounds(&[-1.0], &[1.0]);
        let r = compute_alpha(&parse("x1^2").unwrap(), &parse("x1^2 + 2").unwrap(), &domain, 0.5);
        assert!(matches!(r, Err(Error::EmptySafeSet)));
    }

    #[test]
    fn regions_use_their_formulas() {
        let h = parse("x1^2 + x2^2").unwrap();
        let v = parse("x1^2 + 2*x2^2").unwrap();
        let w = build_patched(&h, &v, 0.5, 0.25, 2).unwrap();
        let p = w.point(&[0.3, 0.1]).unwrap();
        assert_eq!(p.region, Region::Inner);
        assert!((p.w - 0.25 * (0.09 + 0.02)).abs() < 1e-15);
        let p = w.point(&[1.5, 0.0]).unwrap();
        assert_eq!(p.region, Region::Outer);
        assert_eq!(p.w, 2.25);
        let p = w.point(&[0.9, 0.0]).unwrap();
        assert_eq!(p.region, Region::Band);
        let sym = w.w_band().eval(&[0.9, 0.0]).unwrap();
        assert!((p.w - sym).abs() < 1e-14);
    }

    #[test]
    fn product_rule_gradient_matches_symbolic_gradient() {
        let h = parse("logsumexp(3, x1 - 0.5*x2, x2^2 - 1, -x1 - 2)").unwrap();
        let v = parse("x1^2 + 2*x2^2").unwrap();
        let w = build_patched(&h, &v, 0.4, 0.1, 2).unwrap();
        let sym = w.w_band().gradient(2);
        let mut checked = 0;
        for i in 0..60 {
            for j in 0..60 {
                let x = [-3.0 + 0.1 * i as f64, -3.0 + 0.1 * j as f64];
                let p = w.point(&x).unwrap();
                if p.region != Region::Band {
                    continue;
                }
                for (k, g) in sym.iter().enumerate() {
                    let s = g.eval(&x).unwrap();
                    assert!((s - p.grad[k]).abs() <= 1e-9 * (1.0 + s.abs()), "{x:?}: {s} vs {}", p.grad[k]);
                }
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn origin_inside_band_is_rejected() {
        let h = parse("x1^2 + 0.9").unwrap();
        assert!(build_patched(&h, &parse("x1^2").unwrap(), 0.5, 1.0, 1).is_err());
    }
}
