//! Problem files (TOML) and certificates (JSON).
//!
//! Both formats carry a `schema` number and store every expression as an
//! infix string that [`crate::expr::parse`] reads back exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barrier::{box_constraints, ConstraintSet, HalfSpaceCut, RefineRecord};
use crate::certify::{BandAttempt, LocalCheck, VerifyConfig};
use crate::error::{Error, Result};
use crate::expr::{parse, Expr, VectorField};
use crate::interval::IntervalBox;
use crate::verifier::{CheckOptions, VerdictVerified};

pub const SPEC_SCHEMA: u32 = 1;
pub const CERTIFICATE_SCHEMA: u32 = 1;

/// A domain bound: a number or a constant expression such as `"-pi"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bound {
    Number(f64),
    Text(String),
}

impl Bound {
    pub fn value(&self) -> Result<f64> {
        match self {
            Bound::Number(v) => Ok(*v),
            Bound::Text(s) => {
                let e = parse(s)?;
                if e.max_var().is_some() {
                    return Err(Error::InvalidProblem(format!("domain bound {s:?} is not constant")));
                }
                e.eval(&[])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    pub m: usize,
    pub f: Vec<String>,
    /// `n` rows of `m` entries.
    pub g: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lower: Vec<Bound>,
    pub upper: Vec<Bound>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    /// Safe set `{h_i <= 1 for all i}`.
    pub constraints: Vec<String>,
    /// Append the domain-box constraints.
    #[serde(default = "yes")]
    pub box_constraints: bool,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $v:expr;)*) => {
        $(fn $name() -> $ty { $v })*
    };
}

defaults! {
    d_delta: f64 = crate::verifier::DEFAULT_DELTA;
    d_min_box_width: f64 = crate::verifier::DEFAULT_MIN_BOX_WIDTH;
    d_budget: u64 = crate::verifier::DEFAULT_BUDGET;
    d_theta: f64 = crate::barrier::DEFAULT_THETA;
    d_cut_margin: f64 = crate::barrier::DEFAULT_CUT_MARGIN;
    d_k_max: usize = crate::barrier::DEFAULT_K_MAX;
    d_eps_cap: f64 = crate::certify::DEFAULT_EPS_CAP;
    d_band_tol: f64 = crate::certify::DEFAULT_BAND_TOL;
    d_origin_radius: f64 = crate::certify::DEFAULT_ORIGIN_RADIUS;
    d_clf: String = "auto".to_string();
    d_count: usize = 50;
    d_seed: u64 = 1;
    d_dt: f64 = 1e-3;
    d_horizon: f64 = 20.0;
    d_margin: f64 = 1e-3;
    d_stride: usize = 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub tau: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_min_box_width")]
    pub min_box_width: f64,
    #[serde(default = "d_budget")]
    pub budget: u64,
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_cut_margin")]
    pub cut_margin: f64,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_eps_cap")]
    pub eps_cap: f64,
    #[serde(default = "d_band_tol")]
    pub band_tol: f64,
    #[serde(default = "d_origin_radius")]
    pub origin_radius: f64,
    /// A Lyapunov candidate, or `"auto"` for the diagonal grid search.
    #[serde(default = "d_clf")]
    pub clf: String,
    /// Cut at witnesses of the Lyapunov condition as well.
    #[serde(default = "yes")]
    pub clf_cuts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "d_count")]
    pub count: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    /// Initial states are drawn from `{h <= 1 - margin}`.
    #[serde(default = "d_margin")]
    pub margin: f64,
    /// Only every `stride`-th step goes to the trajectory files.
    #[serde(default = "d_stride")]
    pub stride: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            count: d_count(),
            seed: d_seed(),
            dt: d_dt(),
            horizon: d_horizon(),
            margin: d_margin(),
            stride: d_stride(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub schema: u32,
    pub name: String,
    pub system: SystemSpec,
    pub domain: DomainSpec,
    pub safety: SafetySpec,
    pub parameters: Parameters,
    #[serde(default)]
    pub simulation: SimulationSpec,
}

/// A spec with every expression parsed and every invariant checked.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub vf: VectorField,
    pub domain: IntervalBox,
    pub constraints: ConstraintSet,
    /// `None` selects the grid search.
    pub clf: Option<Expr>,
}

impl ProblemSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ProblemSpec = toml::from_str(text)?;
        if spec.schema != SPEC_SCHEMA {
            return Err(Error::InvalidProblem(format!("unsupported spec schema {}", spec.schema)));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("specs always serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn verify_config(&self, options: CheckOptions) -> VerifyConfig {
        VerifyConfig {
            delta: self.parameters.delta,
            min_box_width: self.parameters.min_box_width,
            options: CheckOptions {
                budget: self.parameters.budget,
                ..options
            },
        }
    }

    pub fn resolve(&self) -> Result<Problem> {
        let s = &self.system;
        if s.f.len() != s.n || s.g.len() != s.n || s.g.iter().any(|row| row.len() != s.m) {
            return Err(Error::InvalidProblem(format!(
                "system dimensions disagree with n = {}, m = {}",
                s.n, s.m
            )));
        }
        let parse_all = |v: &[String]| v.iter().map(|e| parse(e)).collect::<Result<Vec<_>>>();
        let f = parse_all(&s.f)?;
        let g = s.g.iter().map(|row| parse_all(row)).collect::<Result<Vec<_>>>()?;
        let vf = VectorField::new(f, g)?;

        let d = &self.domain;
        if d.lower.len() != s.n || d.upper.len() != s.n {
            return Err(Error::InvalidProblem(format!("domain must have {} bounds per side", s.n)));
        }
        let lower = d.lower.iter().map(Bound::value).collect::<Result<Vec<_>>>()?;
        let upper = d.upper.iter().map(Bound::value).collect::<Result<Vec<_>>>()?;
        for i in 0..s.n {
            if !(lower[i] < 0.0 && 0.0 < upper[i]) {
                return Err(Error::InvalidProblem(format!(
                    "domain [{}, {}] of x{} must contain 0 in its interior",
                    lower[i],
                    upper[i],
                    i + 1
                )));
            }
        }
        let domain = IntervalBox::from_bounds(&lower, &upper);

        let mut hs = parse_all(&self.safety.constraints)?;
        if self.safety.box_constraints {
            hs.extend(box_constraints(&domain));
        }
        let constraints = ConstraintSet::new(hs, domain.clone())?;

        let p = &self.parameters;
        if !(p.tau > 0.0) || !(p.delta > 0.0) || !(p.eps_cap > 0.0 && p.eps_cap < 1.0) || !(p.origin_radius > 0.0) {
            return Err(Error::InvalidProblem("tau, delta and origin_radius must be positive; eps_cap must lie in (0, 1)".into()));
        }
        let sim = &self.simulation;
        if !(sim.dt > 0.0) || !(sim.horizon > sim.dt) || !(sim.margin >= 0.0) {
            return Err(Error::InvalidProblem("simulation needs dt > 0, horizon > dt and margin >= 0".into()));
        }
        let clf = match p.clf.trim() {
            "auto" => None,
            text => Some(parse(text)?),
        };
        if let Some(v) = &clf {
            if v.max_var().is_some_and(|i| i >= s.n) {
                return Err(Error::InvalidProblem(format!("Lyapunov candidate {v} uses a variable beyond x{}", s.n)));
            }
        }
        Ok(Problem {
            spec: self.clone(),
            vf,
            domain,
            constraints,
            clf,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub stage: String,
    pub message: String,
    /// 2 for a failed certification, 3 for an exhausted budget.
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    /// Cut `k` rotates with `r_seed = k`.
    pub r_seed_base: u64,
    pub clf_sample_seed: u64,
    pub simulation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierRecord {
    pub tau: f64,
    /// Every softmax term other than the cuts, box constraints included.
    pub constraints: Vec<String>,
    pub cuts: Vec<HalfSpaceCut>,
    pub h_sm: String,
    pub verdict: Option<VerdictVerified>,
    pub refine_log: Vec<RefineRecord>,
    /// Cuts generated from witnesses of the Lyapunov condition.
    pub clf_guided_cuts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfRecord {
    pub v: String,
    pub p: Vec<Vec<f64>>,
    pub quadratic: bool,
    pub origin_radius: f64,
    pub local: LocalCheck,
    pub verdict: VerdictVerified,
    /// Candidates tried before this one (grid search only).
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityRecord {
    pub epsilon: f64,
    pub eps_cap: f64,
    pub band_tol: f64,
    pub verdict: VerdictVerified,
    pub attempts: Vec<BandAttempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub alpha: f64,
    pub epsilon: f64,
    pub v_upper: f64,
    pub v_lower: f64,
    pub w_inner: String,
    pub w_band: String,
    pub w_outer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub schema: u32,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub spec_digest: String,
    pub spec: ProblemSpec,
    pub status: Status,
    pub failure: Option<FailureInfo>,
    pub seeds: Seeds,
    pub barrier: Option<BarrierRecord>,
    pub clf: Option<ClfRecord>,
    pub compatibility: Option<CompatibilityRecord>,
    pub patched: Option<PatchRecord>,
    /// Choices this tool makes where the method leaves room.
    pub divergences: Vec<String>,
}

impl Certificate {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Certificate = serde_json::from_str(text)?;
        if c.schema != CERTIFICATE_SCHEMA {
            return Err(Error::InvalidProblem(format!("unsupported certificate schema {}", c.schema)));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificates always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
