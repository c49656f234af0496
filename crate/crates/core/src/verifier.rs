//! Delta-complete branch-and-prune checker.
//!
//! A [`Query`] asks whether, over a box, every point satisfying the premises
//! (equalities `e = 0` and interval memberships `e in [lo, hi]`) also
//! satisfies the goal `goal < 0`. The search either proves this with interval
//! enclosures or returns a point satisfying the delta-weakened premises with
//! `goal >= -delta`.
//!
//! The root box is pre-split geometrically into a fixed number of subboxes
//! (independent of the thread count). Each subbox is searched depth-first,
//! lower half first, and the reported counterexample is the first one in that
//! canonical order, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::{Expr, Tape};
use crate::interval::{Interval, IntervalBox};

pub const DEFAULT_DELTA: f64 = 1e-4;
pub const DEFAULT_MIN_BOX_WIDTH: f64 = 1e-5;
pub const DEFAULT_BUDGET: u64 = 5_000_000;
const CONTRACT_ROUNDS: usize = 4;
/// A contraction round counts as progress when some side shrinks below this
/// fraction of its previous width.
const CONTRACT_PROGRESS: f64 = 0.9;

const PRESPLIT_DEPTH: usize = 6;
const TRACE_EVERY: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalConstraint {
    pub expr: Expr,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct Query {
    pub domain: IntervalBox,
    pub equalities: Vec<Expr>,
    pub interval_constraints: Vec<IntervalConstraint>,
    pub goal: Expr,
    pub delta: f64,
    pub min_box_width: f64,
}

impl Query {
    pub fn new(domain: IntervalBox, goal: Expr) -> Self {
        Query {
            domain,
            equalities: Vec::new(),
            interval_constraints: Vec::new(),
            goal,
            delta: DEFAULT_DELTA,
            min_box_width: DEFAULT_MIN_BOX_WIDTH,
        }
    }

    pub fn equal_zero(mut self, e: Expr) -> Self {
        self.equalities.push(e);
        self
    }

    pub fn within(mut self, e: Expr, lo: f64, hi: f64) -> Self {
        self.interval_constraints.push(IntervalConstraint { expr: e, lo, hi });
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_min_box_width(mut self, w: f64) -> Self {
        self.min_box_width = w;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.min_box_width > 0.0) {
            return Err(Error::InvalidProblem("delta and min_box_width must be positive".into()));
        }
        let n = self.domain.dim();
        if self.domain.dims().iter().any(|i| !i.lo().is_finite() || !i.hi().is_finite()) {
            return Err(Error::InvalidProblem("query box must be bounded".into()));
        }
        let exprs = self
            .equalities
            .iter()
            .chain(self.interval_constraints.iter().map(|c| &c.expr))
            .chain(std::iter::once(&self.goal));
        for e in exprs {
            if let Some(i) = e.max_var() {
                if i >= n {
                    return Err(Error::InvalidProblem(format!("x{} outside a {n}-dimensional query box", i + 1)));
                }
            }
        }
        for c in &self.interval_constraints {
            if !(c.lo <= c.hi) {
                return Err(Error::InvalidProblem(format!("empty premise interval [{}, {}]", c.lo, c.hi)));
            }
        }
        Ok(())
    }

    /// Stable textual rendering, hashed into the verdict digest.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "box {:?} {:?}", self.domain.lower(), self.domain.upper());
        for e in &self.equalities {
            let _ = writeln!(s, "eq {e}");
        }
        for c in &self.interval_constraints {
            let _ = writeln!(s, "in {:?} {:?} {}", c.lo, c.hi, c.expr);
        }
        let _ = writeln!(s, "goal {}", self.goal);
        let _ = writeln!(s, "delta {:?} min_width {:?}", self.delta, self.min_box_width);
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SearchOrder {
    #[default]
    DepthFirst,
    BreadthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub budget: u64,
    /// 0 selects the global rayon pool.
    pub threads: usize,
    pub order: SearchOrder,
    pub trace: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            budget: DEFAULT_BUDGET,
            threads: 0,
            order: SearchOrder::DepthFirst,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictVerified {
    pub digest: String,
    pub delta: f64,
    pub boxes: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictCounterexample {
    pub point: Vec<f64>,
    pub equality_residuals: Vec<f64>,
    pub interval_values: Vec<f64>,
    pub goal_value: f64,
    pub boxes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Verified(VerdictVerified),
    Counterexample(VerdictCounterexample),
}

impl Verdict {
    pub fn is_verified(&self) -> bool {
        matches!(self, Verdict::Verified(_))
    }

    pub fn counterexample(&self) -> Option<&VerdictCounterexample> {
        match self {
            Verdict::Counterexample(c) => Some(c),
            Verdict::Verified(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prune {
    Pruned,
    Undecided,
    CandidateCounterexample(Vec<f64>),
}

/// A query with its expressions compiled into one tape:
/// outputs are `[equalities.., interval constraints.., goal]`.
pub(crate) struct Compiled<'q> {
    q: &'q Query,
    tape: Tape,
    /// Exact requirement per tape output; the goal row asks for a violation.
    ranges: Vec<Interval>,
}

impl<'q> Compiled<'q> {
    pub(crate) fn new(q: &'q Query) -> Self {
        let mut exprs: Vec<Expr> = q.equalities.clone();
        exprs.extend(q.interval_constraints.iter().map(|c| c.expr.clone()));
        exprs.push(q.goal.clone());
        let mut ranges = vec![Interval::point(0.0); q.equalities.len()];
        ranges.extend(q.interval_constraints.iter().map(|c| Interval::new(c.lo, c.hi)));
        ranges.push(Interval::new(0.0, f64::INFINITY));
        Compiled {
            q,
            tape: Tape::compile(&exprs),
            ranges,
        }
    }

    /// Shrinks `b` towards points that satisfy the exact premises and violate
    /// the goal; `None` when there are none.
    fn contract(&self, mut b: IntervalBox, buf: &mut Vec<Interval>) -> Result<Option<IntervalBox>> {
        for _ in 0..CONTRACT_ROUNDS {
            let before = b.clone();
            if !self.tape.contract(b.dims_mut(), &self.ranges, buf)? {
                return Ok(None);
            }
            let progressed = before
                .dims()
                .iter()
                .zip(b.dims())
                .any(|(o, n)| n.width() < CONTRACT_PROGRESS * o.width());
            if !progressed {
                break;
            }
        }
        Ok(Some(b))
    }

    fn n_eq(&self) -> usize {
        self.q.equalities.len()
    }

    fn prune(&self, b: &IntervalBox) -> Result<Prune> {
        let encl = self.tape.eval_interval(b.dims())?;
        let n_eq = self.n_eq();
        for e in &encl[..n_eq] {
            if !e.contains(0.0) {
                return Ok(Prune::Pruned);
            }
        }
        for (e, c) in encl[n_eq..encl.len() - 1].iter().zip(&self.q.interval_constraints) {
            if e.hi() < c.lo || e.lo() > c.hi {
                return Ok(Prune::Pruned);
            }
        }
        if encl[encl.len() - 1].hi() < 0.0 {
            return Ok(Prune::Pruned);
        }
        let mid = b.midpoint();
        if self.is_candidate(&mid) {
            return Ok(Prune::CandidateCounterexample(mid));
        }
        Ok(Prune::Undecided)
    }

    /// Point test against the delta-weakened premises and goal.
    fn is_candidate(&self, x: &[f64]) -> bool {
        let Ok(vals) = self.tape.eval_point(x) else {
            return false;
        };
        self.candidate_values(&vals)
    }

    fn candidate_values(&self, vals: &[f64]) -> bool {
        let d = self.q.delta;
        let n_eq = self.n_eq();
        let eq_ok = vals[..n_eq].iter().all(|v| v.abs() <= d);
        let ic_ok = vals[n_eq..vals.len() - 1]
            .iter()
            .zip(&self.q.interval_constraints)
            .all(|(v, c)| *v >= c.lo - d && *v <= c.hi + d);
        eq_ok && ic_ok && vals[vals.len() - 1] >= -d
    }

    fn witness(&self, x: Vec<f64>, boxes: u64) -> Result<VerdictCounterexample> {
        let vals = self.tape.eval_point(&x)?;
        let n_eq = self.n_eq();
        Ok(VerdictCounterexample {
            equality_residuals: vals[..n_eq].to_vec(),
            interval_values: vals[n_eq..vals.len() - 1].to_vec(),
            goal_value: vals[vals.len() - 1],
            point: x,
            boxes,
        })
    }
}

pub fn prune(q: &Query, b: &IntervalBox) -> Result<Prune> {
    q.validate()?;
    Compiled::new(q).prune(b)
}

enum TaskOutcome {
    Clean,
    /// Undecided boxes remained at the minimum width.
    Unresolved(u64),
    Exhausted,
    Found(Vec<f64>),
}

struct TaskResult {
    boxes: u64,
    outcome: TaskOutcome,
}

struct Shared {
    explored: AtomicU64,
    /// Smallest task index that has found a counterexample.
    first_found: AtomicUsize,
}

fn presplit(root: &IntervalBox, min_width: f64) -> Vec<IntervalBox> {
    let mut level = vec![root.clone()];
    for _ in 0..PRESPLIT_DEPTH {
        if level[0].width() <= min_width {
            break;
        }
        level = level
            .iter()
            .flat_map(|b| {
                let (l, r) = b.split();
                [l, r]
            })
            .collect();
    }
    level
}

fn run_task(c: &Compiled, index: usize, root: IntervalBox, opts: &CheckOptions, shared: &Shared) -> Result<TaskResult> {
    let mut work = std::collections::VecDeque::new();
    work.push_back((root, 0usize));
    let mut boxes = 0u64;
    let mut unresolved = 0u64;
    let mut max_depth = 0usize;
    let mut buf = Vec::new();
    while let Some((b, depth)) = match opts.order {
        SearchOrder::DepthFirst => work.pop_back(),
        SearchOrder::BreadthFirst => work.pop_front(),
    } {
        if shared.first_found.load(Ordering::Relaxed) < index {
            // An earlier task already decides the verdict.
            return Ok(TaskResult {
                boxes,
                outcome: TaskOutcome::Clean,
            });
        }
        boxes += 1;
        max_depth = max_depth.max(depth);
        let total = shared.explored.fetch_add(1, Ordering::Relaxed) + 1;
        if opts.trace && total % TRACE_EVERY == 0 {
            eprintln!("[verifier] explored {total} boxes, max depth {max_depth}, frontier {}", work.len());
        }
        if boxes > opts.budget {
            return Ok(TaskResult {
                boxes,
                outcome: TaskOutcome::Exhausted,
            });
        }
        let Some(b) = c.contract(b, &mut buf)? else {
            continue;
        };
        match c.prune(&b)? {
            Prune::Pruned => {}
            Prune::CandidateCounterexample(x) => {
                shared.first_found.fetch_min(index, Ordering::Relaxed);
                return Ok(TaskResult {
                    boxes,
                    outcome: TaskOutcome::Found(x),
                });
            }
            Prune::Undecided => {
                if b.width() <= c.q.min_box_width {
                    unresolved += 1;
                    continue;
                }
                let (lower, upper) = b.split();
                match opts.order {
                    SearchOrder::DepthFirst => {
                        work.push_back((upper, depth + 1));
                        work.push_back((lower, depth + 1));
                    }
                    SearchOrder::BreadthFirst => {
                        work.push_back((lower, depth + 1));
                        work.push_back((upper, depth + 1));
                    }
                }
            }
        }
    }
    Ok(TaskResult {
        boxes,
        outcome: if unresolved > 0 {
            TaskOutcome::Unresolved(unresolved)
        } else {
            TaskOutcome::Clean
        },
    })
}

/// Decides the query; see the module documentation for the semantics.
pub fn check(q: &Query, opts: &CheckOptions) -> Result<Verdict> {
    q.validate()?;
    let start = Instant::now();
    let compiled = Compiled::new(q);
    let tasks = presplit(&q.domain, q.min_box_width);
    let shared = Shared {
        explored: AtomicU64::new(0),
        first_found: AtomicUsize::new(usize::MAX),
    };
    let run = || -> Vec<Result<TaskResult>> {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, b)| run_task(&compiled, i, b.clone(), opts, &shared))
            .collect()
    };
    let results = if opts.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::InvalidProblem(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };

    // Sequential-equivalent reduction in canonical task order.
    let mut total = 0u64;
    let mut unresolved = 0u64;
    for r in results {
        let r = r?;
        total += r.boxes;
        if total > opts.budget {
            return Err(Error::ResourceExhausted {
                boxes: total,
                reason: format!("box budget {} exceeded", opts.budget),
            });
        }
        match r.outcome {
            TaskOutcome::Clean => {}
            TaskOutcome::Unresolved(k) => unresolved += k,
            TaskOutcome::Exhausted => {
                return Err(Error::ResourceExhausted {
                    boxes: total,
                    reason: format!("box budget {} exceeded", opts.budget),
                })
            }
            TaskOutcome::Found(x) => {
                return Ok(Verdict::Counterexample(compiled.witness(x, total)?));
            }
        }
    }
    if unresolved > 0 {
        return Err(Error::ResourceExhausted {
            boxes: total,
            reason: format!("{unresolved} undecided boxes at minimum width {:e}", q.min_box_width),
        });
    }
    Ok(Verdict::Verified(VerdictVerified {
        digest: q.digest(),
        delta: q.delta,
        boxes: total,
        wall_time_s: start.elapsed().as_secs_f64(),
    }))
}

/// Re-checks a witness against the counterexample invariants by point
/// evaluation.
pub fn witness_is_valid(q: &Query, w: &VerdictCounterexample) -> bool {
    let c = Compiled::new(q);
    q.domain.contains_point(&w.point) && c.is_candidate(&w.point)
}
