//! Verification of the strict barrier condition, the CLF condition on the
//! safe set, and boundary-band compatibility of a (V, h) pair.
//!
//! Compatibility asks for one input that decreases both V and h. By the
//! Farkas alternative this is equivalent to a universally quantified
//! implication over multipliers `lambda` on the simplex, which the verifier
//! handles by appending `lambda1, lambda2` as extra box dimensions.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{lie_derivatives, Expr, VectorField};
use crate::interval::{eval_interval, Interval, IntervalBox};
use crate::verifier::{self, CheckOptions, Query, Verdict, VerdictCounterexample, VerdictVerified};

pub const DEFAULT_ORIGIN_RADIUS: f64 = 0.1;
pub const DEFAULT_EPS_CAP: f64 = 0.5;
pub const DEFAULT_BAND_TOL: f64 = 1e-3;
/// Required margin on the largest eigenvalue in the local origin check.
pub const LOCAL_EIG_MARGIN: f64 = 1e-6;
/// Seed of the positivity spot check on Lyapunov candidates.
pub const CLF_SAMPLE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub delta: f64,
    pub min_box_width: f64,
    pub options: CheckOptions,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            delta: verifier::DEFAULT_DELTA,
            min_box_width: verifier::DEFAULT_MIN_BOX_WIDTH,
            options: CheckOptions::default(),
        }
    }
}

impl VerifyConfig {
    fn finish(&self, q: Query) -> Query {
        q.with_delta(self.delta).with_min_box_width(self.min_box_width)
    }
}

/// `(h = 1 and L_g h = 0) => L_f h < 0`.
pub fn strict_cbf_query(h: &Expr, vf: &VectorField, domain: &IntervalBox, cfg: &VerifyConfig) -> Query {
    let (lf, lg) = lie_derivatives(h, vf);
    let mut q = Query::new(domain.clone(), lf).within(h.clone(), 1.0, 1.0);
    for e in lg {
        q = q.equal_zero(e);
    }
    cfg.finish(q)
}

pub fn verify_strict_cbf(h: &Expr, vf: &VectorField, domain: &IntervalBox, cfg: &VerifyConfig) -> Result<Verdict> {
    verifier::check(&strict_cbf_query(h, vf, domain, cfg), &cfg.options)
}

/// `(L_g V = 0 and h <= 1 and |x| >= r) => L_f V < 0`. The open premise
/// `h <= 1` is closed below by the enclosure of h over the domain.
pub fn clf_query(v: &Expr, h: &Expr, vf: &VectorField, domain: &IntervalBox, origin_radius: f64, cfg: &VerifyConfig) -> Result<Query> {
    if !(origin_radius > 0.0) {
        return Err(Error::InvalidProblem(format!("origin radius must be positive, got {origin_radius}")));
    }
    let (lf, lg) = lie_derivatives(v, vf);
    let h_lo = eval_interval(h, domain)?.lo().min(1.0);
    let norm_sq = Expr::sum((0..domain.dim()).map(|i| Expr::var(i).powi(2)));
    let r2 = origin_radius * origin_radius;
    let mut q = Query::new(domain.clone(), lf)
        .within(h.clone(), h_lo, 1.0)
        .within(norm_sq, r2, domain.max_norm_sq().max(r2));
    for e in lg {
        q = q.equal_zero(e);
    }
    Ok(cfg.finish(q))
}

/// CLF condition on the safe set away from the origin, plus the local
/// quadratic check inside the excluded ball.
pub fn verify_clf_on_c(v: &Expr, h: &Expr, vf: &VectorField, domain: &IntervalBox, origin_radius: f64, cfg: &VerifyConfig) -> Result<Verdict> {
    let clf = ClfCandidate::new(v.clone(), domain)?;
    local_origin_check(&clf, vf)?;
    verifier::check(&clf_query(v, h, vf, domain, origin_radius, cfg)?, &cfg.options)
}

/// Band compatibility over `(x, lambda1, lambda2)`:
/// `(1 - eps <= h <= 1, lambda1 + lambda2 = 1, lambda1 L_g V + lambda2 L_g h = 0)
///  => lambda1 L_f V + lambda2 L_f h < 0`.
pub fn band_query(v: &Expr, h: &Expr, vf: &VectorField, domain: &IntervalBox, eps: f64, cfg: &VerifyConfig) -> Result<Query> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidProblem(format!("band width must lie in (0, 1), got {eps}")));
    }
    let n = domain.dim();
    let (l1, l2) = (Expr::var(n), Expr::var(n + 1));
    let (lfv, lgv) = lie_derivatives(v, vf);
    let (lfh, lgh) = lie_derivatives(h, vf);
    let unit = Interval::new(0.0, 1.0);
    let goal = l1.mul(&lfv).add(&l2.mul(&lfh));
    let mut q = Query::new(domain.extended(&[unit, unit]), goal)
        .within(h.clone(), 1.0 - eps, 1.0)
        .equal_zero(l1.add(&l2).sub(&Expr::one()));
    for (a, b) in lgv.iter().zip(&lgh) {
        q = q.equal_zero(l1.mul(a).add(&l2.mul(b)));
    }
    Ok(cfg.finish(q))
}

pub fn verify_compatibility_band(v: &Expr, h: &Expr, vf: &VectorField, domain: &IntervalBox, eps: f64, cfg: &VerifyConfig) -> Result<Verdict> {
    verifier::check(&band_query(v, h, vf, domain, eps, cfg)?, &cfg.options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandAttempt {
    pub epsilon: f64,
    /// `verified`, `counterexample` or `exhausted`.
    pub outcome: String,
}

#[derive(Debug, Clone)]
pub enum BandSearch {
    Found {
        epsilon: f64,
        verdict: VerdictVerified,
        attempts: Vec<BandAttempt>,
    },
    Failure {
        last: Option<VerdictCounterexample>,
        attempts: Vec<BandAttempt>,
    },
}

/// Largest band width in `[tol, eps_cap]` (to resolution `tol`) for which
/// the band query verifies. A resource-exhausted attempt counts as a miss.
pub fn bisect_band(v: &Expr, h: &Expr, vf: &VectorField, domain: &IntervalBox, eps_cap: f64, tol: f64, cfg: &VerifyConfig) -> Result<BandSearch> {
    if !(eps_cap > 0.0 && eps_cap < 1.0) || !(tol > 0.0) || tol > eps_cap {
        return Err(Error::InvalidProblem(format!("bad band search range: cap {eps_cap}, tol {tol}")));
    }
    let mut attempts = Vec::new();
    let mut last_cex = None;
    let mut attempt = |eps: f64, attempts: &mut Vec<BandAttempt>| -> Result<Option<VerdictVerified>> {
        let (outcome, res) = match verify_compatibility_band(v, h, vf, domain, eps, cfg) {
            Ok(Verdict::Verified(ok)) => ("verified", Some(ok)),
            Ok(Verdict::Counterexample(c)) => {
                last_cex = Some(c);
                ("counterexample", None)
            }
            Err(Error::ResourceExhausted { .. }) => ("exhausted", None),
            Err(e) => return Err(e),
        };
        attempts.push(BandAttempt {
            epsilon: eps,
            outcome: outcome.into(),
        });
        Ok(res)
    };

    if let Some(ok) = attempt(eps_cap, &mut attempts)? {
        return Ok(BandSearch::Found {
            epsilon: eps_cap,
            verdict: ok,
            attempts,
        });
    }
    let Some(mut best) = attempt(tol, &mut attempts)? else {
        return Ok(BandSearch::Failure { last: last_cex, attempts });
    };
    let (mut lo, mut hi) = (tol, eps_cap);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        match attempt(mid, &mut attempts)? {
            Some(ok) => {
                lo = mid;
                best = ok;
            }
            None => hi = mid,
        }
    }
    Ok(BandSearch::Found {
        epsilon: lo,
        verdict: best,
        attempts,
    })
}

/// Decides `exists u: A u < b` for a 2 x m matrix by the LP
/// `min s  s.t.  A u - s 1 <= b,  s >= -1`; feasible iff the optimum is negative.
pub fn farkas_feasible(a: &[Vec<f64>; 2], b: [f64; 2]) -> bool {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let m = a[0].len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let u: Vec<_> = (0..m).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let s = lp.add_var(1.0, (-1.0, f64::INFINITY));
    for (row, &rhs) in a.iter().zip(&b) {
        let mut terms: Vec<_> = u.iter().zip(row).map(|(&v, &c)| (v, c)).collect();
        terms.push((s, -1.0));
        lp.add_constraint(terms, ComparisonOp::Le, rhs);
    }
    match lp.solve() {
        Ok(sol) => sol.objective() < 0.0,
        Err(_) => false,
    }
}

/// A candidate CLF together with its quadratic part at the origin,
/// `P = Hess V(0) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfCandidate {
    pub v: Expr,
    pub p: Vec<Vec<f64>>,
    /// True when every second derivative of V is constant, i.e. `V = x'Px`.
    pub quadratic: bool,
}

impl ClfCandidate {
    pub fn new(v: Expr, domain: &IntervalBox) -> Result<Self> {
        let n = domain.dim();
        if v.max_var().is_some_and(|i| i >= n) {
            return Err(Error::InvalidProblem(format!("V = {v} uses a variable beyond x{n}")));
        }
        let zero = vec![0.0; n];
        let v0 = v.eval(&zero)?;
        if v0.abs() > 1e-12 {
            return Err(Error::InvalidProblem(format!("V(0) = {v0}, expected 0")));
        }
        let grad = v.gradient(n);
        let mut p = vec![vec![0.0; n]; n];
        let mut quadratic = true;
        for (i, gi) in grad.iter().enumerate() {
            if gi.eval(&zero)?.abs() > 1e-9 {
                return Err(Error::InvalidProblem("V has a nonzero gradient at the origin".into()));
            }
            for (j, pij) in p[i].iter_mut().enumerate() {
                let d = gi.differentiate(j);
                quadratic &= d.as_const().is_some();
                *pij = 0.5 * d.eval(&zero)?;
            }
        }
        let pm = DMatrix::from_fn(n, n, |i, j| 0.5 * (p[i][j] + p[j][i]));
        if pm.clone().cholesky().is_none() {
            return Err(Error::InvalidProblem("quadratic part of V is not positive definite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CLF_SAMPLE_SEED);
        for _ in 0..1000 {
            let x: Vec<f64> = domain.dims().iter().map(|iv| rng.gen_range(iv.lo()..=iv.hi())).collect();
            if x.iter().any(|&c| c != 0.0) && !(v.eval(&x)? > 0.0) {
                return Err(Error::InvalidProblem(format!("V is not positive at {x:?}")));
            }
        }
        Ok(ClfCandidate { v, p, quadratic })
    }
}

/// Result of the quadratic check inside the origin ball: the linear feedback
/// `u = K x` with `K = -(c/2) G' P` renders `V` strictly decreasing for the
/// linearization `x' = (A + G K) x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCheck {
    pub gain: f64,
    pub feedback: Vec<Vec<f64>>,
    pub max_eigenvalue: f64,
}

impl LocalCheck {
    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        self.feedback.iter().map(|row| row.iter().zip(x).map(|(k, xi)| k * xi).sum()).collect()
    }
}

pub fn local_origin_check(clf: &ClfCandidate, vf: &VectorField) -> Result<LocalCheck> {
    let (n, m) = (vf.dim_state(), vf.dim_input());
    let zero = vec![0.0; n];
    let mut a = DMatrix::zeros(n, n);
    for (i, fi) in vf.drift().iter().enumerate() {
        for j in 0..n {
            a[(i, j)] = fi.differentiate(j).eval(&zero)?;
        }
    }
    let mut g = DMatrix::zeros(n, m);
    for (i, row) in vf.input_matrix().iter().enumerate() {
        for (j, gij) in row.iter().enumerate() {
            g[(i, j)] = gij.eval(&zero)?;
        }
    }
    let p = DMatrix::from_fn(n, n, |i, j| 0.5 * (clf.p[i][j] + clf.p[j][i]));
    let lyap = a.transpose() * &p + &p * &a;
    let pg = &p * &g;
    let pggp = &pg * pg.transpose();
    let mut best = f64::INFINITY;
    for k in -12..=48 {
        let c = if k == -12 { 0.0 } else { 10f64.powf(k as f64 / 4.0) };
        let k_mat = &g.transpose() * &p * (-0.5 * c);
        let a_cl = &a + &g * &k_mat;
        let q = a_cl.transpose() * &p + &p * &a_cl;
        let q = (&q + q.transpose()) * 0.5;
        let top = SymmetricEigen::new(q).eigenvalues.max();
        best = best.min(top);
        if top < -LOCAL_EIG_MARGIN {
            debug_assert!(((&lyap - &pggp * c) - (a_cl.transpose() * &p + &p * &a_cl)).norm() <= 1e-6 * (1.0 + lyap.norm() + c * pggp.norm()));
            let feedback = (0..m).map(|r| (0..n).map(|s| k_mat[(r, s)]).collect()).collect();
            return Ok(LocalCheck {
                gain: c,
                feedback,
                max_eigenvalue: top,
            });
        }
    }
    Err(Error::LocalCheckFailed(format!(
        "no gain makes A_cl'P + P A_cl negative definite (best largest eigenvalue {best:.3e})"
    )))
}

/// Diagonal quadratics `sum_i d_i x_i^2` with `d_1 = 1` and the remaining
/// weights drawn from `grid`, in lexicographic order.
pub fn diagonal_candidates(n: usize, grid: &[f64]) -> Vec<Expr> {
    let mut out = Vec::new();
    let mut idx = vec![0usize; n.saturating_sub(1)];
    loop {
        let terms = (0..n).map(|i| {
            let d = if i == 0 { 1.0 } else { grid[idx[i - 1]] };
            Expr::constant(d).mul(&Expr::var(i).powi(2))
        });
        out.push(Expr::sum(terms));
        let mut k = idx.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < grid.len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

pub const DEFAULT_DIAGONAL_GRID: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn vf(f: &[&str], g: &[&[&str]]) -> VectorField {
        VectorField::new(
            f.iter().map(|s| parse(s).unwrap()).collect(),
            g.iter().map(|r| r.iter().map(|s| parse(s).unwrap()).collect()).collect(),
        )
        .unwrap()
    }

    fn quick() -> VerifyConfig {
        VerifyConfig {
            delta: 1e-4,
            min_box_width: 1e-5,
            options: CheckOptions {
                budget: 2_000_000,
                ..CheckOptions::default()
            },
        }
    }

    #[test]
    fn radial_contraction_is_a_strict_barrier() {
        let sys = vf(&["-x1", "-x2"], &[&["0"], &["0"]]);
        let h = parse("x1^2 + x2^2 - 0.25 + 1").unwrap();
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        assert!(verify_strict_cbf(&h, &sys, &domain, &quick()).unwrap().is_verified());
    }

    #[test]
    fn anti_stable_drift_breaks_the_clf_condition() {
        let sys = vf(&["x1", "x2"], &[&["0"], &["0"]]);
        let v = parse("x1^2 + x2^2").unwrap();
        let h = parse("x1^2 + x2^2").unwrap();
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        let q = clf_query(&v, &h, &sys, &domain, 0.1, &quick()).unwrap();
        let verdict = verifier::check(&q, &quick().options).unwrap();
        let cex = verdict.counterexample().expect("drift pushes V up");
        assert!(verifier::witness_is_valid(&q, cex));
        // No input authority at all, so the local check must fail too.
        let clf = ClfCandidate::new(v, &domain).unwrap();
        assert!(matches!(local_origin_check(&clf, &sys), Err(Error::LocalCheckFailed(_))));
    }

    #[test]
    fn unit_input_gains_make_band_vacuous() {
        // L_g V = L_g h = 1 everywhere: lambda1 + lambda2 = 0 contradicts the simplex.
        let sys = vf(&["0", "0"], &[&["1"], &["0"]]);
        let v = parse("x1 + x2^2").unwrap();
        let h = parse("x1 + 0.5").unwrap();
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        assert!(verify_compatibility_band(&v, &h, &sys, &domain, 0.3, &quick()).unwrap().is_verified());
    }

    #[test]
    fn incompatible_pair_fails_bisection() {
        let sys = vf(&["x1", "x2"], &[&["0"], &["0"]]);
        let v = parse("x1^2 + x2^2").unwrap();
        let h = parse("2 - x1^2 - x2^2").unwrap();
        let domain = IntervalBox::from_bounds(&[-2.0, -2.0], &[2.0, 2.0]);
        match bisect_band(&v, &h, &sys, &domain, 0.5, 1e-3, &quick()).unwrap() {
            BandSearch::Failure { last, attempts } => {
                assert_eq!(attempts.len(), 2);
                assert!(last.is_some());
            }
            BandSearch::Found { epsilon, .. } => panic!("unexpectedly verified at {epsilon}"),
        }
    }

    #[test]
    fn bisection_exits_early_at_the_cap() {
        let sys = vf(&["0", "0"], &[&["1"], &["0"]]);
        let v = parse("x1 + x2^2").unwrap();
        let h = parse("x1 + 0.5").unwrap();
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        match bisect_band(&v, &h, &sys, &domain, 0.5, 1e-3, &quick()).unwrap() {
            BandSearch::Found { epsilon, attempts, .. } => {
                assert_eq!(epsilon, 0.5);
                assert_eq!(attempts.len(), 1);
            }
            BandSearch::Failure { .. } => panic!("vacuous band must verify"),
        }
    }

    #[test]
    fn farkas_examples() {
        assert!(farkas_feasible(&[vec![1.0], vec![-1.0]], [1.0, 1.0]));
        assert!(!farkas_feasible(&[vec![1.0], vec![-1.0]], [0.0, 0.0]));
        assert!(farkas_feasible(&[vec![1.0, 0.0], vec![0.0, 1.0]], [-5.0, -5.0]));
        assert!(!farkas_feasible(&[vec![0.0], vec![0.0]], [1.0, -1.0]));
    }

    #[test]
    fn quadratic_part_is_extracted() {
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        let c = ClfCandidate::new(parse("x1^2 + 2*x2^2 + x1*x2").unwrap(), &domain).unwrap();
        assert!(c.quadratic);
        assert_eq!(c.p, vec![vec![1.0, 0.5], vec![0.5, 2.0]]);
        assert!(ClfCandidate::new(parse("x1^2 - x2^2").unwrap(), &domain).is_err());
        assert!(ClfCandidate::new(parse("x1^2 + x2^2 + 1").unwrap(), &domain).is_err());
    }

    #[test]
    fn local_check_for_the_toy_system() {
        let sys = vf(&["0", "-sin(x1)"], &[&["1"], &["-1"]]);
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        let clf = ClfCandidate::new(parse("x1^2 + 2*x2^2").unwrap(), &domain).unwrap();
        let lc = local_origin_check(&clf, &sys).unwrap();
        assert!(lc.gain > 0.5 && lc.max_eigenvalue < -LOCAL_EIG_MARGIN);
        assert_eq!(lc.feedback.len(), 1);
    }

    #[test]
    fn diagonal_grid_enumeration() {
        let c = diagonal_candidates(3, &[1.0, 2.0]);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].eval(&[1.0, 1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(c[1].eval(&[0.0, 0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(diagonal_candidates(1, &[1.0]).len(), 1);
    }
}
