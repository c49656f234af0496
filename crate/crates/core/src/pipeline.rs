//! End-to-end orchestration behind the command-line tool: synthesis,
//! certificate replay, closed-loop simulation, grid export and the
//! benchmark table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{build_softmax, make_cut, refine, BarrierCandidate, ConstraintSet, RefineOutcome, RefineParams, RefineRecord};
use crate::certify::{
    self, bisect_band, diagonal_candidates, local_origin_check, BandAttempt, BandSearch, ClfCandidate, LocalCheck,
    CLF_SAMPLE_SEED, DEFAULT_DIAGONAL_GRID,
};
use crate::control::{simulate, SontagController, Termination, Trajectory};
use crate::error::{Error, Result};
use crate::expr::{parse, Expr};
use crate::patch::{build_patched, compute_alpha, AlphaBound, PatchedClbf};
use crate::problem::{
    BarrierRecord, Certificate, ClfRecord, CompatibilityRecord, FailureInfo, PatchRecord, Problem, ProblemSpec, Seeds, Status,
    CERTIFICATE_SCHEMA,
};
use crate::verifier::{self, CheckOptions, Query, Verdict, VerdictVerified};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_EXHAUSTED: i32 = 3;

/// A trajectory counts as converged once `|x| <= 1e-2`.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-2;
/// Allowed overshoot of `h` above 1 along a trajectory.
pub const SAFETY_TOLERANCE: f64 = 1e-6;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::InvalidProblem(_) | Error::UnsupportedDimension(_) | Error::Serde(_) | Error::Io(_) => EXIT_USAGE,
        Error::ResourceExhausted { .. } => EXIT_EXHAUSTED,
        _ => EXIT_FAILED,
    }
}

/// Command-line overrides of spec parameters.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub delta: Option<f64>,
    pub tau: Option<f64>,
    pub k_max: Option<usize>,
    pub theta: Option<f64>,
    pub cut_margin: Option<f64>,
    pub eps_cap: Option<f64>,
    pub origin_radius: Option<f64>,
    pub budget: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ProblemSpec) {
        let p = &mut spec.parameters;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        set!(delta, tau, k_max, theta, cut_margin, eps_cap, origin_radius, budget);
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

const DIVERGENCES: [&str; 4] = [
    "origin ball: the Lyapunov condition is checked outside |x| < origin_radius; inside, P = Hess V(0)/2 must satisfy A_cl'P + P A_cl < -1e-6 I for a linear feedback K = -(c/2) G'P",
    "controller: Sontag's formula in its |B|^4 form without the small-control refinement, switching to the local linear feedback for |x| < 1e-3",
    "compatibility: band search by bisection on [band_tol, eps_cap], stopping at eps_cap when the cap verifies",
    "max of V over the safe set bounded by interval branch and bound with a 1% relative gap",
];

struct Stage {
    name: &'static str,
    error: Error,
}

fn at(name: &'static str) -> impl Fn(Error) -> Stage {
    move |error| Stage { name, error }
}

struct Partial {
    barrier: Option<BarrierRecord>,
    clf: Option<ClfRecord>,
    compatibility: Option<CompatibilityRecord>,
    patched: Option<PatchRecord>,
}

/// Runs the whole pipeline. Ingestion errors are returned as `Err`; every
/// later failure yields a certificate with `status = failed`.
pub fn synthesize(spec: &ProblemSpec, options: &CheckOptions) -> Result<Certificate> {
    let problem = spec.resolve()?;
    let mut partial = Partial {
        barrier: None,
        clf: None,
        compatibility: None,
        patched: None,
    };
    let failure = match run_stages(&problem, options, &mut partial) {
        Ok(()) => None,
        Err(Stage { name, error }) => {
            if options.trace {
                eprintln!("[pipeline] {name} failed: {error}");
            }
            Some(FailureInfo {
                stage: name.into(),
                message: error.to_string(),
                exit_code: if matches!(error, Error::ResourceExhausted { .. }) { EXIT_EXHAUSTED } else { EXIT_FAILED },
            })
        }
    };
    let mut divergences: Vec<String> = DIVERGENCES.iter().map(|s| s.to_string()).collect();
    if partial.barrier.as_ref().is_some_and(|b| b.clf_guided_cuts > 0) {
        divergences.push("refinement also cuts at witnesses of the Lyapunov condition on the safe set".into());
    }
    Ok(Certificate {
        schema: CERTIFICATE_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created: now(),
        spec_digest: spec.digest(),
        spec: spec.clone(),
        status: if failure.is_none() { Status::Certified } else { Status::Failed },
        failure,
        seeds: Seeds {
            r_seed_base: 0,
            clf_sample_seed: CLF_SAMPLE_SEED,
            simulation_seed: spec.simulation.seed,
        },
        barrier: partial.barrier,
        clf: partial.clf,
        compatibility: partial.compatibility,
        patched: partial.patched,
        divergences,
    })
}

fn barrier_record(cand: &BarrierCandidate, verdict: Option<VerdictVerified>, log: Vec<RefineRecord>, clf_guided_cuts: usize) -> BarrierRecord {
    BarrierRecord {
        tau: cand.tau(),
        constraints: cand.base().constraints().iter().map(Expr::to_string).collect(),
        cuts: cand.cuts().to_vec(),
        h_sm: cand.h_sm().to_string(),
        verdict,
        refine_log: log,
        clf_guided_cuts,
    }
}

fn verified(v: Verdict) -> Option<VerdictVerified> {
    match v {
        Verdict::Verified(ok) => Some(ok),
        Verdict::Counterexample(_) => None,
    }
}

fn run_stages(problem: &Problem, options: &CheckOptions, out: &mut Partial) -> std::result::Result<(), Stage> {
    let spec = &problem.spec;
    let p = &spec.parameters;
    let cfg = spec.verify_config(*options);
    let trace = |msg: String| {
        if options.trace {
            eprintln!("[pipeline] {msg}");
        }
    };
    let vf = &problem.vf;
    let domain = &problem.domain;

    let mut cand = build_softmax(problem.constraints.clone(), p.tau).map_err(at("softmax"))?;
    let mut log: Vec<RefineRecord> = Vec::new();
    let mut clf_guided = 0usize;

    // Barrier refinement, interleaved with cuts at Lyapunov witnesses when a
    // fixed candidate is given.
    let (barrier_verdict, clf_choice) = loop {
        let remaining = p.k_max.saturating_sub(cand.cuts().len());
        let params = RefineParams {
            k_max: remaining,
            theta: p.theta,
            cut_margin: p.cut_margin,
        };
        let outcome = refine(cand, vf, &params, &cfg).map_err(at("refine"))?;
        log.extend(outcome.log().iter().cloned());
        let (c, verdict) = match outcome {
            RefineOutcome::Verified { candidate, verdict, .. } => (candidate, verdict),
            RefineOutcome::Failure { candidate, last, .. } => {
                out.barrier = Some(barrier_record(&candidate, None, log, clf_guided));
                return Err(Stage {
                    name: "refine",
                    error: Error::Stage {
                        stage: "refine",
                        msg: format!("strict barrier condition still fails at {:?} after {} cuts", last.point, candidate.cuts().len()),
                    },
                });
            }
        };
        cand = c;
        trace(format!("barrier verified with {} cuts", cand.cuts().len()));
        let Some(v) = &problem.clf else {
            break (verified(verdict), None);
        };
        let clf = ClfCandidate::new(v.clone(), domain).map_err(at("clf"))?;
        let local = local_origin_check(&clf, vf).map_err(at("clf"))?;
        let q = certify::clf_query(v, cand.h_sm(), vf, domain, p.origin_radius, &cfg).map_err(at("clf"))?;
        match verifier::check(&q, &cfg.options).map_err(at("clf"))? {
            Verdict::Verified(ok) => break (verified(verdict), Some((clf, local, ok))),
            Verdict::Counterexample(w) => {
                if !p.clf_cuts || cand.cuts().len() >= p.k_max {
                    out.barrier = Some(barrier_record(&cand, verified(verdict), log, clf_guided));
                    return Err(Stage {
                        name: "clf",
                        error: Error::Stage {
                            stage: "clf",
                            msg: format!("Lyapunov condition fails at {:?} (L_f V = {:e})", w.point, w.goal_value),
                        },
                    });
                }
                trace(format!("Lyapunov witness {:?}; cutting", w.point));
                let cut = make_cut(&w.point, &cand, p.theta, p.cut_margin, cand.cuts().len() as u64).map_err(at("clf"))?;
                cand = cand.push_cut(cut.clone()).map_err(at("clf"))?;
                let h_after = cand.h_sm().eval(&w.point).ok();
                log.push(RefineRecord {
                    iteration: log.len(),
                    verified: false,
                    witness: Some(w.point.clone()),
                    goal_value: Some(w.goal_value),
                    cut: Some(cut),
                    h_after,
                    boxes: w.boxes,
                });
                clf_guided += 1;
            }
        }
    };
    out.barrier = Some(barrier_record(&cand, barrier_verdict, log, clf_guided));
    let h = cand.h_sm();

    let candidates: Vec<(Expr, Option<(ClfCandidate, LocalCheck, VerdictVerified)>)> = match clf_choice {
        Some((clf, local, ok)) => vec![(clf.v.clone(), Some((clf, local, ok)))],
        None => diagonal_candidates(domain.dim(), &DEFAULT_DIAGONAL_GRID)
            .into_iter()
            .map(|v| (v, None))
            .collect(),
    };
    let mut rejected = Vec::new();
    let mut last_error = None;
    for (v, pre) in candidates {
        let checked = match pre {
            Some(x) => Ok(x),
            None => (|| {
                let clf = ClfCandidate::new(v.clone(), domain)?;
                let local = local_origin_check(&clf, vf)?;
                let q = certify::clf_query(&v, h, vf, domain, p.origin_radius, &cfg)?;
                match verifier::check(&q, &cfg.options)? {
                    Verdict::Verified(ok) => Ok((clf, local, ok)),
                    Verdict::Counterexample(w) => Err(Error::Stage {
                        stage: "clf",
                        msg: format!("Lyapunov condition for {v} fails at {:?}", w.point),
                    }),
                }
            })(),
        };
        let (clf, local, clf_ok) = match checked {
            Ok(x) => x,
            Err(e) => {
                trace(format!("candidate {v} rejected: {e}"));
                rejected.push(v.to_string());
                last_error = Some(Stage { name: "clf", error: e });
                continue;
            }
        };
        trace(format!("Lyapunov condition verified for {v}"));
        out.clf = Some(ClfRecord {
            v: v.to_string(),
            p: clf.p.clone(),
            quadratic: clf.quadratic,
            origin_radius: p.origin_radius,
            local,
            verdict: clf_ok,
            rejected: rejected.clone(),
        });
        match bisect_band(&v, h, vf, domain, p.eps_cap, p.band_tol, &cfg).map_err(at("compatibility"))? {
            BandSearch::Found { epsilon, verdict, attempts } => {
                trace(format!("band verified at eps = {epsilon}"));
                out.compatibility = Some(CompatibilityRecord {
                    epsilon,
                    eps_cap: p.eps_cap,
                    band_tol: p.band_tol,
                    verdict,
                    attempts,
                });
                let bound = compute_alpha(&v, h, domain, epsilon).map_err(at("patch"))?;
                let w = build_patched(h, &v, epsilon, bound.alpha, domain.dim()).map_err(at("patch"))?;
                out.patched = Some(patch_record(&w, &bound));
                return Ok(());
            }
            BandSearch::Failure { last, attempts } => {
                rejected.push(v.to_string());
                let msg = format!(
                    "no band width in [{}, {}] verifies for {v} (attempts {}; last witness {:?})",
                    p.band_tol,
                    p.eps_cap,
                    attempts_summary(&attempts),
                    last.map(|c| c.point)
                );
                trace(msg.clone());
                last_error = Some(Stage {
                    name: "compatibility",
                    error: Error::Stage { stage: "compatibility", msg },
                });
            }
        }
    }
    Err(last_error.unwrap_or(Stage {
        name: "clf",
        error: Error::InvalidProblem("no Lyapunov candidate".into()),
    }))
}

fn attempts_summary(a: &[BandAttempt]) -> String {
    a.iter().map(|x| format!("{}:{}", x.epsilon, x.outcome)).collect::<Vec<_>>().join(", ")
}

fn patch_record(w: &PatchedClbf, bound: &AlphaBound) -> PatchRecord {
    PatchRecord {
        alpha: w.alpha(),
        epsilon: w.epsilon(),
        v_upper: bound.v_upper,
        v_lower: bound.v_lower,
        w_inner: w.v2().to_string(),
        w_band: w.w_band().to_string(),
        w_outer: w.h().to_string(),
    }
}

/// Reads a spec, applies overrides, synthesizes and writes the certificate.
/// Returns the exit code.
pub fn cmd_synthesize(spec_path: &Path, out: &Path, overrides: &Overrides, options: &CheckOptions) -> Result<(Certificate, i32)> {
    let mut spec = ProblemSpec::load(spec_path)?;
    overrides.apply(&mut spec);
    let cert = synthesize(&spec, options)?;
    cert.save(out)?;
    let code = cert.failure.as_ref().map_or(EXIT_OK, |f| f.exit_code);
    Ok((cert, code))
}

/// Everything a certified artifact describes, rebuilt from its strings.
pub struct Rebuilt {
    pub problem: Problem,
    pub barrier: BarrierCandidate,
    pub v: Expr,
    pub local: LocalCheck,
    pub patched: PatchedClbf,
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::InvalidProblem(format!("certificate has no {name} section")))
}

fn rebuild_barrier(cert: &Certificate, problem: &Problem) -> Result<BarrierCandidate> {
    let b = section(&cert.barrier, "barrier")?;
    let base = b.constraints.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
    let cs = ConstraintSet::new(base, problem.domain.clone())?;
    BarrierCandidate::with_cuts(cs, b.cuts.clone(), b.tau)
}

pub fn rebuild(cert: &Certificate) -> Result<Rebuilt> {
    let problem = cert.spec.resolve()?;
    let barrier = rebuild_barrier(cert, &problem)?;
    let clf = section(&cert.clf, "clf")?;
    let v = parse(&clf.v)?;
    let pr = section(&cert.patched, "patched")?;
    let patched = build_patched(barrier.h_sm(), &v, pr.epsilon, pr.alpha, problem.domain.dim())?;
    Ok(Rebuilt {
        problem,
        barrier,
        v,
        local: clf.local.clone(),
        patched,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub checks: Vec<ReplayCheck>,
    pub exhausted: bool,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.ok)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_OK
        } else if self.exhausted {
            EXIT_EXHAUSTED
        } else {
            EXIT_FAILED
        }
    }
}

/// Replays the three stored queries and the patch at the stored parameters.
/// Verifier runs stop after the first failing query; later queries are
/// still compared by digest.
pub fn replay(cert: &Certificate, options: &CheckOptions) -> Result<ReplayReport> {
    let mut report = ReplayReport {
        checks: Vec::new(),
        exhausted: false,
    };
    let push = |report: &mut ReplayReport, name: &str, ok: bool, detail: String| {
        report.checks.push(ReplayCheck {
            name: name.into(),
            ok,
            detail,
        })
    };
    push(
        &mut report,
        "status",
        cert.status == Status::Certified,
        format!("{:?}", cert.status),
    );
    push(
        &mut report,
        "spec digest",
        cert.spec.digest() == cert.spec_digest,
        cert.spec_digest.clone(),
    );
    let problem = cert.spec.resolve()?;
    let p = &problem.spec.parameters;
    let cfg = cert.spec.verify_config(*options);
    let (Some(b), Some(clf), Some(compat), Some(pr)) = (&cert.barrier, &cert.clf, &cert.compatibility, &cert.patched) else {
        push(&mut report, "sections", false, "certificate is incomplete".into());
        return Ok(report);
    };

    let barrier = match rebuild_barrier(cert, &problem) {
        Ok(b) => b,
        Err(e) => {
            push(&mut report, "barrier", false, e.to_string());
            return Ok(report);
        }
    };
    let h = barrier.h_sm();
    let expected: Vec<String> = problem.constraints.constraints().iter().map(Expr::to_string).collect();
    push(
        &mut report,
        "constraints",
        expected == b.constraints,
        format!("{} stored, {} from the problem", b.constraints.len(), expected.len()),
    );
    push(
        &mut report,
        "barrier expression",
        h.to_string() == b.h_sm,
        format!("tau = {}, {} cuts", b.tau, b.cuts.len()),
    );
    let v = parse(&clf.v)?;
    let vf = &problem.vf;
    let domain = &problem.domain;

    let mut queries: Vec<(&str, Result<Query>, Option<&VerdictVerified>)> = vec![
        ("barrier query", Ok(certify::strict_cbf_query(h, vf, domain, &cfg)), b.verdict.as_ref()),
        (
            "clf query",
            certify::clf_query(&v, h, vf, domain, clf.origin_radius, &cfg),
            Some(&clf.verdict),
        ),
        (
            "band query",
            certify::band_query(&v, h, vf, domain, compat.epsilon, &cfg),
            Some(&compat.verdict),
        ),
    ];
    if !(compat.epsilon > 0.0 && compat.epsilon <= p.eps_cap) {
        push(
            &mut report,
            "band width",
            false,
            format!("epsilon {} outside (0, {}]", compat.epsilon, p.eps_cap),
        );
    }
    if clf.origin_radius != p.origin_radius {
        push(&mut report, "origin radius", false, format!("{} vs spec {}", clf.origin_radius, p.origin_radius));
    }
    let mut run = report.checks.iter().all(|c| c.ok);
    for (name, q, stored) in queries.drain(..) {
        let q = match q {
            Ok(q) => q,
            Err(e) => {
                push(&mut report, name, false, e.to_string());
                run = false;
                continue;
            }
        };
        let digest = q.digest();
        let Some(stored) = stored else {
            push(&mut report, name, false, "no stored verdict".into());
            run = false;
            continue;
        };
        if digest != stored.digest {
            push(
                &mut report,
                name,
                false,
                format!("query digest {} differs from the certified {}", &digest[..12], &stored.digest[..12.min(stored.digest.len())]),
            );
            run = false;
            continue;
        }
        if !run {
            push(&mut report, name, false, "digest matches; not replayed after an earlier failure".into());
            continue;
        }
        match verifier::check(&q, &cfg.options) {
            Ok(Verdict::Verified(ok)) => push(&mut report, name, true, format!("verified ({} boxes)", ok.boxes)),
            Ok(Verdict::Counterexample(c)) => {
                push(&mut report, name, false, format!("counterexample at {:?}", c.point));
                run = false;
            }
            Err(e) => {
                report.exhausted |= matches!(e, Error::ResourceExhausted { .. });
                push(&mut report, name, false, e.to_string());
                run = false;
            }
        }
    }

    match ClfCandidate::new(v.clone(), domain).and_then(|c| local_origin_check(&c, vf)) {
        Ok(local) => push(&mut report, "local check", local == clf.local, format!("gain {}", local.gain)),
        Err(e) => push(&mut report, "local check", false, e.to_string()),
    }
    if run {
        match compute_alpha(&v, h, domain, compat.epsilon) {
            Ok(bound) => {
                let ok = bound.v_upper == pr.v_upper && pr.alpha <= bound.alpha && pr.epsilon == compat.epsilon;
                push(&mut report, "alpha", ok, format!("alpha {} (recomputed {})", pr.alpha, bound.alpha));
            }
            Err(e) => push(&mut report, "alpha", false, e.to_string()),
        }
        match build_patched(h, &v, pr.epsilon, pr.alpha, domain.dim()) {
            Ok(w) => {
                let same = w.v2().to_string() == pr.w_inner && w.w_band().to_string() == pr.w_band && w.h().to_string() == pr.w_outer;
                push(&mut report, "patched function", same, "region formulas".into());
            }
            Err(e) => push(&mut report, "patched function", false, e.to_string()),
        }
    }
    Ok(report)
}

pub fn cmd_verify(cert_path: &Path, options: &CheckOptions) -> Result<(ReplayReport, i32)> {
    let cert = Certificate::load(cert_path)?;
    let report = replay(&cert, options)?;
    let code = report.exit_code();
    Ok((report, code))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub index: usize,
    pub x0: Vec<f64>,
    pub final_state: Vec<f64>,
    pub steps: usize,
    pub termination: Option<Termination>,
    pub converged: bool,
    pub max_h: f64,
    pub max_w: f64,
    pub max_w_increase: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub count: usize,
    pub converged: usize,
    pub safe: usize,
    pub max_h: f64,
    pub max_w: f64,
    pub max_w_increase: f64,
    pub trajectories: Vec<TrajectorySummary>,
}

impl SimulationSummary {
    pub fn passed(&self) -> bool {
        self.converged == self.count && self.safe == self.count
    }
}

/// `count` uniform samples of `{h <= 1 - margin}` by rejection.
pub fn sample_safe_starts(h: &Expr, problem: &Problem, count: usize, seed: u64, margin: f64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = problem.domain.dims();
    let mut out = Vec::with_capacity(count);
    let mut tries = 0u64;
    while out.len() < count {
        tries += 1;
        if tries > 1_000_000 + 1000 * count as u64 {
            return Err(Error::EmptySafeSet);
        }
        let x: Vec<f64> = dims.iter().map(|iv| rng.gen_range(iv.lo()..=iv.hi())).collect();
        if h.eval(&x)? <= 1.0 - margin {
            out.push(x);
        }
    }
    Ok(out)
}

fn summarize(index: usize, x0: &[f64], r: Result<Trajectory>) -> (TrajectorySummary, Option<Trajectory>) {
    match r {
        Ok(t) => {
            let fin = t.final_state().to_vec();
            let norm = fin.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = TrajectorySummary {
                index,
                x0: x0.to_vec(),
                final_state: fin,
                steps: t.t.len(),
                termination: Some(t.termination),
                converged: t.termination != Termination::Escaped && norm <= CONVERGENCE_TOLERANCE,
                max_h: t.max_h(),
                max_w: t.max_w(),
                max_w_increase: if t.w.len() > 1 { t.max_w_increase() } else { 0.0 },
                error: None,
            };
            (s, Some(t))
        }
        Err(e) => (
            TrajectorySummary {
                index,
                x0: x0.to_vec(),
                final_state: x0.to_vec(),
                steps: 0,
                termination: None,
                converged: false,
                max_h: f64::NAN,
                max_w: f64::NAN,
                max_w_increase: f64::NAN,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Simulates the closed loop from `count` safe starts. With `out_dir`, one
/// TSV per trajectory plus `summary.tsv` and `summary.json` are written.
pub fn simulate_certificate(cert: &Certificate, count: usize, seed: u64, out_dir: Option<&Path>) -> Result<SimulationSummary> {
    let rb = rebuild(cert)?;
    let sim = &cert.spec.simulation;
    let starts = sample_safe_starts(rb.barrier.h_sm(), &rb.problem, count, seed, sim.margin)?;
    let ctrl = SontagController::new(&rb.patched, &rb.problem.vf, Some(rb.local.clone()));
    let domain = &rb.problem.domain;
    let results: Vec<(TrajectorySummary, Option<Trajectory>)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| summarize(i, x0, simulate(&ctrl, x0, sim.dt, sim.horizon, domain)))
        .collect();

    let mut summary = SimulationSummary {
        count,
        converged: 0,
        safe: 0,
        max_h: f64::NEG_INFINITY,
        max_w: f64::NEG_INFINITY,
        max_w_increase: f64::NEG_INFINITY,
        trajectories: Vec::with_capacity(count),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for (s, t) in results {
        summary.converged += s.converged as usize;
        summary.safe += (s.error.is_none() && s.max_h <= 1.0 + SAFETY_TOLERANCE) as usize;
        summary.max_h = summary.max_h.max(s.max_h);
        summary.max_w = summary.max_w.max(s.max_w);
        summary.max_w_increase = summary.max_w_increase.max(s.max_w_increase);
        if let (Some(dir), Some(t)) = (out_dir, t) {
            let f = std::fs::File::create(dir.join(format!("trajectory_{:03}.tsv", s.index)))?;
            t.write_tsv(std::io::BufWriter::new(f), sim.stride)?;
        }
        summary.trajectories.push(s);
    }
    if let Some(dir) = out_dir {
        let mut tsv = String::from("index\tconverged\tsteps\tmax_h\tmax_W\tmax_dW\terror\n");
        for s in &summary.trajectories {
            let _ = writeln!(
                tsv,
                "{}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{}",
                s.index,
                s.converged,
                s.steps,
                s.max_h,
                s.max_w,
                s.max_w_increase,
                s.error.as_deref().unwrap_or("-")
            );
        }
        std::fs::write(dir.join("summary.tsv"), tsv)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: usize,
    pub segments: Vec<[[f64; 2]; 2]>,
    /// Fixed coordinate of the exported slice (3-D only).
    pub slice: Option<(usize, f64)>,
    pub files: Vec<PathBuf>,
}

/// Segments of the 0-level set of `values` sampled on a `res x res` grid
/// over `[x0, x1] x [y0, y1]`, by marching squares with linear
/// interpolation. `values[i * res + j]` belongs to `(xs[i], ys[j])`.
pub fn marching_squares(xs: &[f64], ys: &[f64], values: &[f64]) -> Vec<[[f64; 2]; 2]> {
    let (nx, ny) = (xs.len(), ys.len());
    let at = |i: usize, j: usize| values[i * ny + j];
    let lerp = |p: [f64; 2], q: [f64; 2], a: f64, b: f64| {
        let t = a / (a - b);
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
    };
    let mut segs = Vec::new();
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let corners = [
                ([xs[i], ys[j]], at(i, j)),
                ([xs[i + 1], ys[j]], at(i + 1, j)),
                ([xs[i + 1], ys[j + 1]], at(i + 1, j + 1)),
                ([xs[i], ys[j + 1]], at(i, j + 1)),
            ];
            let mut pts = Vec::with_capacity(4);
            for k in 0..4 {
                let (p, a) = corners[k];
                let (q, b) = corners[(k + 1) % 4];
                if (a <= 0.0) != (b <= 0.0) {
                    pts.push(lerp(p, q, a, b));
                }
            }
            // Saddles (four crossings) pair up along the cell edges in order.
            for pair in pts.chunks_exact(2) {
                segs.push([pair[0], pair[1]]);
            }
        }
    }
    segs
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Writes `grid.tsv` (`x.. h W`), `level.tsv` (segments of `{h = 1}`) and,
/// for three states, `slice.txt` naming the fixed coordinate.
pub fn grid_certificate(cert: &Certificate, resolution: usize, out_dir: &Path) -> Result<GridReport> {
    let rb = rebuild(cert)?;
    let n = rb.problem.domain.dim();
    if !(n == 2 || n == 3) {
        return Err(Error::UnsupportedDimension(n));
    }
    if resolution < 2 {
        return Err(Error::InvalidProblem("grid resolution must be at least 2".into()));
    }
    let dims = rb.problem.domain.dims();
    let xs = linspace(dims[0].lo(), dims[0].hi(), resolution);
    let ys = linspace(dims[1].lo(), dims[1].hi(), resolution);
    let slice = (n == 3).then(|| (2usize, 0.0f64));
    let points: Vec<Vec<f64>> = xs
        .iter()
        .flat_map(|&x| {
            ys.iter().map(move |&y| match slice {
                Some((_, z)) => vec![x, y, z],
                None => vec![x, y],
            })
        })
        .collect();
    let values: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| {
            let p = rb.patched.point(x)?;
            Ok((p.h, p.w))
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut text = String::new();
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let _ = writeln!(text, "{}\th\tW", names.join("\t"));
    for (x, (h, w)) in points.iter().zip(&values) {
        let coords: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(text, "{}\t{h:e}\t{w:e}", coords.join("\t"));
    }
    let path = out_dir.join("grid.tsv");
    std::fs::write(&path, text)?;
    files.push(path);

    let shifted: Vec<f64> = values.iter().map(|(h, _)| h - 1.0).collect();
    let segments = marching_squares(&xs, &ys, &shifted);
    let mut text = String::from("x1_a\tx2_a\tx1_b\tx2_b\n");
    for s in &segments {
        let _ = writeln!(text, "{:e}\t{:e}\t{:e}\t{:e}", s[0][0], s[0][1], s[1][0], s[1][1]);
    }
    let path = out_dir.join("level.tsv");
    std::fs::write(&path, text)?;
    files.push(path);
    if let Some((axis, value)) = slice {
        let path = out_dir.join("slice.txt");
        std::fs::write(&path, format!("fixed x{} = {value}\nfree x1 x2\nresolution {resolution}\n", axis + 1))?;
        files.push(path);
    }
    Ok(GridReport {
        rows: points.len(),
        segments,
        slice,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub status: Status,
    pub cuts: usize,
    pub clf: Option<String>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub seconds: f64,
    pub failure: Option<String>,
}

/// Synthesizes every `*.spec` in `dir`, in name order.
pub fn bench(dir: &Path, overrides: &Overrides, options: &CheckOptions) -> Result<Vec<BenchRow>> {
    let mut specs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "spec"))
        .collect();
    specs.sort();
    let mut rows = Vec::new();
    for path in specs {
        let mut spec = ProblemSpec::load(&path)?;
        overrides.apply(&mut spec);
        let start = Instant::now();
        let cert = synthesize(&spec, options)?;
        rows.push(BenchRow {
            name: spec.name.clone(),
            status: cert.status,
            cuts: cert.barrier.as_ref().map_or(0, |b| b.cuts.len()),
            clf: cert.clf.as_ref().map(|c| c.v.clone()),
            epsilon: cert.compatibility.as_ref().map(|c| c.epsilon),
            alpha: cert.patched.as_ref().map(|p| p.alpha),
            seconds: start.elapsed().as_secs_f64(),
            failure: cert.failure.as_ref().map(|f| format!("{}: {}", f.stage, f.message)),
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<16} {:<6} {:>5} {:>10} {:>12} {:>9}  V", "example", "result", "cuts", "epsilon", "alpha", "seconds");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        let _ = writeln!(
            t,
            "{:<16} {:<6} {:>5} {:>10} {:>12} {:>9.2}  {}",
            r.name,
            if r.status == Status::Certified { "pass" } else { "FAIL" },
            r.cuts,
            opt(r.epsilon),
            opt(r.alpha),
            r.seconds,
            r.clf.as_deref().unwrap_or("-")
        );
        if let Some(f) = &r.failure {
            let _ = writeln!(t, "    {f}");
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marching_squares_on_a_circle() {
        let xs = linspace(-2.0, 2.0, 81);
        let vals: Vec<f64> = xs
            .iter()
            .flat_map(|&x| xs.iter().map(move |&y| x * x + y * y - 1.0))
            .collect();
        let segs = marching_squares(&xs, &xs, &vals);
        assert!(segs.len() > 40);
        for s in &segs {
            for p in s {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!((r - 1.0).abs() < 0.01, "{p:?}");
            }
        }
    }

    #[test]
    fn overrides_replace_parameters() {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../benchmarks/ex1_toy.spec")).unwrap();
        let mut spec = ProblemSpec::from_toml(&text).unwrap();
        Overrides {
            tau: Some(2.0),
            k_max: Some(3),
            ..Default::default()
        }
        .apply(&mut spec);
        assert_eq!(spec.parameters.tau, 2.0);
        assert_eq!(spec.parameters.k_max, 3);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidProblem(String::new())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::ResourceExhausted {
                boxes: 1,
                reason: String::new()
            }),
            EXIT_EXHAUSTED
        );
        assert_eq!(exit_code(&Error::EmptySafeSet), EXIT_FAILED);
    }
}
