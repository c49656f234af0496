//! Softmax barrier construction and counterexample-guided half-space
//! refinement.
//!
//! The safe set `{max_i h_i <= 1}` is under-approximated by the 1-sublevel
//! set of `h_sm = (1/tau) log sum_i exp(tau h_i)`, which satisfies
//! `h_max <= h_sm <= h_max + log(N)/tau`. When the strict barrier condition
//! fails at a verifier witness `x*`, a half-space `n_new.x - b_new + 1 <= 1`
//! is added whose normal is the level-set normal at `x*` rotated by a small
//! angle, shifted so that `x*` lies strictly outside.

use serde::{Deserialize, Serialize};

use crate::certify::{self, VerifyConfig};
use crate::error::{Error, Result};
use crate::expr::{Expr, VectorField};
use crate::interval::IntervalBox;
use crate::verifier::{Verdict, VerdictCounterexample};

pub const DEFAULT_THETA: f64 = 0.05;
pub const DEFAULT_CUT_MARGIN: f64 = 0.01;
pub const DEFAULT_K_MAX: usize = 25;
/// Witnesses closer than this to the previous one flip the rotation sign.
pub const NEARBY_WITNESS: f64 = 0.1;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Domain-box constraints `1 + x_j - upper_j <= 1` and `1 - x_j + lower_j <= 1`.
pub fn box_constraints(domain: &IntervalBox) -> Vec<Expr> {
    let mut out = Vec::with_capacity(2 * domain.dim());
    for (j, iv) in domain.dims().iter().enumerate() {
        let x = Expr::var(j);
        out.push(Expr::one().add(&x).sub(&Expr::constant(iv.hi())));
        out.push(Expr::one().sub(&x).add(&Expr::constant(iv.lo())));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    constraints: Vec<Expr>,
    domain: IntervalBox,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Expr>, domain: IntervalBox) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::InvalidProblem("at least one safety constraint is required".into()));
        }
        let n = domain.dim();
        for h in &constraints {
            if h.max_var().is_some_and(|i| i >= n) {
                return Err(Error::InvalidProblem(format!("constraint {h} uses a variable beyond x{n}")));
            }
        }
        let cs = ConstraintSet { constraints, domain };
        let at_origin = cs.h_max(&vec![0.0; n])?;
        if !(at_origin < 1.0) {
            return Err(Error::InvalidProblem(format!(
                "origin is not strictly safe: max_i h_i(0) = {at_origin}"
            )));
        }
        Ok(cs)
    }

    pub fn constraints(&self) -> &[Expr] {
        &self.constraints
    }

    pub fn domain(&self) -> &IntervalBox {
        &self.domain
    }

    pub fn h_max(&self, x: &[f64]) -> Result<f64> {
        let mut m = f64::NEG_INFINITY;
        for h in &self.constraints {
            m = m.max(h.eval(x)?);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceCut {
    pub normal: Vec<f64>,
    pub offset: f64,
    /// The verifier witness the cut was generated from.
    pub witness: Vec<f64>,
}

impl HalfSpaceCut {
    /// `n.x - b + 1`.
    pub fn expr(&self) -> Expr {
        let lin = Expr::sum(self.normal.iter().enumerate().map(|(i, &c)| Expr::constant(c).mul(&Expr::var(i))));
        lin.sub(&Expr::constant(self.offset)).add(&Expr::one())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset + 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierCandidate {
    base: ConstraintSet,
    cuts: Vec<HalfSpaceCut>,
    tau: f64,
    h_sm: Expr,
}

/// Materializes the softmax barrier over the constraint set.
pub fn build_softmax(cs: ConstraintSet, tau: f64) -> Result<BarrierCandidate> {
    BarrierCandidate::with_cuts(cs, Vec::new(), tau)
}

impl BarrierCandidate {
    pub fn with_cuts(base: ConstraintSet, cuts: Vec<HalfSpaceCut>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidProblem(format!("temperature must be positive, got {tau}")));
        }
        let terms: Vec<Expr> = base
            .constraints
            .iter()
            .cloned()
            .chain(cuts.iter().map(HalfSpaceCut::expr))
            .collect();
        let h_sm = Expr::log_sum_exp(tau, terms);
        Ok(BarrierCandidate { base, cuts, tau, h_sm })
    }

    pub fn base(&self) -> &ConstraintSet {
        &self.base
    }

    pub fn cuts(&self) -> &[HalfSpaceCut] {
        &self.cuts
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn h_sm(&self) -> &Expr {
        &self.h_sm
    }

    pub fn num_terms(&self) -> usize {
        self.base.constraints.len() + self.cuts.len()
    }

    /// Pointwise maximum over base constraints and cuts.
    pub fn h_max(&self, x: &[f64]) -> Result<f64> {
        let m = self.base.h_max(x)?;
        Ok(self.cuts.iter().map(|c| c.eval(x)).fold(m, f64::max))
    }

    /// Upper slack `log(N)/tau` of the softmax over the pointwise maximum.
    pub fn gap(&self) -> f64 {
        (self.num_terms() as f64).ln() / self.tau
    }

    pub fn push_cut(&self, cut: HalfSpaceCut) -> Result<Self> {
        let mut cuts = self.cuts.clone();
        cuts.push(cut);
        Self::with_cuts(self.base.clone(), cuts, self.tau)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector orthogonal to the unit vector `n`, chosen deterministically.
/// Dimension 1 has no orthogonal direction and yields `None`.
pub fn orthogonal_direction(n: &[f64], r_seed: u64) -> Option<Vec<f64>> {
    let dim = n.len();
    if dim < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()).then(a.cmp(&b)));
    let mut basis: Vec<Vec<f64>> = vec![n.to_vec()];
    for &k in &order {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= p * bi);
        }
        let len = norm(&v);
        if len > 1e-8 {
            v.iter_mut().for_each(|vi| *vi /= len);
            basis.push(v);
        }
        if basis.len() == 3 || basis.len() == dim {
            break;
        }
    }
    let r0 = basis[1].clone();
    if basis.len() < 3 || r_seed == 0 {
        return Some(r0);
    }
    let phi = r_seed as f64 * GOLDEN_ANGLE;
    let s = &basis[2];
    let r: Vec<f64> = r0.iter().zip(s).map(|(a, b)| phi.cos() * a + phi.sin() * b).collect();
    let len = norm(&r);
    Some(r.into_iter().map(|v| v / len).collect())
}

/// Builds the half-space cut excluding `x_star`. A negative `theta` rotates
/// towards `-r`; `|theta|` must be below `pi/2`.
pub fn make_cut(x_star: &[f64], candidate: &BarrierCandidate, theta: f64, eps_cut: f64, r_seed: u64) -> Result<HalfSpaceCut> {
    if !(theta.abs() < std::f64::consts::FRAC_PI_2) || !(eps_cut > 0.0) {
        return Err(Error::InvalidProblem(format!("bad cut parameters theta={theta}, margin={eps_cut}")));
    }
    let dim = candidate.base.domain.dim();
    let grad: Vec<f64> = candidate
        .h_sm
        .gradient(dim)
        .iter()
        .map(|d| d.eval(x_star))
        .collect::<Result<_>>()?;
    let len = norm(&grad);
    if !(len > 1e-10) {
        return Err(Error::DegenerateGradient { norm: len });
    }
    let n: Vec<f64> = grad.iter().map(|g| g / len).collect();
    let normal = match orthogonal_direction(&n, r_seed) {
        Some(r) => {
            let v: Vec<f64> = n.iter().zip(&r).map(|(a, b)| a * theta.cos() + b * theta.sin()).collect();
            let l = norm(&v);
            v.into_iter().map(|c| c / l).collect()
        }
        None => n,
    };
    let offset = dot(&normal, x_star) - eps_cut;
    Ok(HalfSpaceCut {
        normal,
        offset,
        witness: x_star.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    pub k_max: usize,
    pub theta: f64,
    pub cut_margin: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            k_max: DEFAULT_K_MAX,
            theta: DEFAULT_THETA,
            cut_margin: DEFAULT_CUT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub iteration: usize,
    pub verified: bool,
    pub witness: Option<Vec<f64>>,
    pub goal_value: Option<f64>,
    pub cut: Option<HalfSpaceCut>,
    /// Barrier value at the witness after the cut was added.
    pub h_after: Option<f64>,
    pub boxes: u64,
}

#[derive(Debug, Clone)]
pub enum RefineOutcome {
    Verified {
        candidate: BarrierCandidate,
        verdict: Verdict,
        log: Vec<RefineRecord>,
    },
    Failure {
        candidate: BarrierCandidate,
        last: VerdictCounterexample,
        log: Vec<RefineRecord>,
    },
}

impl RefineOutcome {
    pub fn log(&self) -> &[RefineRecord] {
        match self {
            RefineOutcome::Verified { log, .. } | RefineOutcome::Failure { log, .. } => log,
        }
    }

    pub fn candidate(&self) -> &BarrierCandidate {
        match self {
            RefineOutcome::Verified { candidate, .. } | RefineOutcome::Failure { candidate, .. } => candidate,
        }
    }
}

/// Counterexample-guided refinement: verify, cut at the witness, rebuild,
/// until the strict barrier condition holds or `k_max` cuts were added in
/// this call. Cut `k` of the candidate uses `r_seed = k`.
pub fn refine(candidate: BarrierCandidate, vf: &VectorField, params: &RefineParams, cfg: &VerifyConfig) -> Result<RefineOutcome> {
    let mut cand = candidate;
    let mut log = Vec::new();
    let mut last_witness: Option<Vec<f64>> = None;
    let mut last_sign = 1.0;
    for iteration in 0.. {
        let domain = cand.base.domain.clone();
        let verdict = certify::verify_strict_cbf(&cand.h_sm, vf, &domain, cfg)?;
        let cex = match verdict {
            Verdict::Verified(ref v) => {
                log.push(RefineRecord {
                    iteration,
                    verified: true,
                    witness: None,
                    goal_value: None,
                    cut: None,
                    h_after: None,
                    boxes: v.boxes,
                });
                return Ok(RefineOutcome::Verified {
                    candidate: cand,
                    verdict,
                    log,
                });
            }
            Verdict::Counterexample(c) => c,
        };
        if iteration >= params.k_max {
            log.push(RefineRecord {
                iteration,
                verified: false,
                witness: Some(cex.point.clone()),
                goal_value: Some(cex.goal_value),
                cut: None,
                h_after: None,
                boxes: cex.boxes,
            });
            return Ok(RefineOutcome::Failure {
                candidate: cand,
                last: cex,
                log,
            });
        }
        let x_star = cex.point.clone();
        let sign = match &last_witness {
            Some(prev) if distance(prev, &x_star) < NEARBY_WITNESS => -last_sign,
            _ => 1.0,
        };
        let cut = make_cut(&x_star, &cand, sign * params.theta, params.cut_margin, cand.cuts.len() as u64)?;
        cand = cand.push_cut(cut.clone())?;
        let h_after = cand.h_sm.eval(&x_star)?;
        log.push(RefineRecord {
            iteration,
            verified: false,
            witness: Some(x_star.clone()),
            goal_value: Some(cex.goal_value),
            cut: Some(cut),
            h_after: Some(h_after),
            boxes: cex.boxes,
        });
        last_witness = Some(x_star);
        last_sign = sign;
    }
    unreachable!()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
