//! Sontag's universal formula on a certified function and closed-loop
//! simulation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::certify::LocalCheck;
use crate::error::{Error, Result};
use crate::expr::{Expr, Tape, VectorField};
use crate::interval::IntervalBox;
use crate::patch::PatchedClbf;

/// `‖L_g W‖` below this counts as zero.
pub const B_FLOOR: f64 = 1e-9;
/// Radius inside which the linear feedback of the local check takes over.
pub const LOCAL_RADIUS: f64 = 1e-3;
/// Simulations stop once the state is this close to the origin.
pub const CONVERGED_RADIUS: f64 = 1e-3;
pub const BLOWUP_FACTOR: f64 = 10.0;

/// Something with a value, a gradient and a barrier value at every point.
pub trait ControlFunction: Sync {
    /// `(W, grad W, h)`.
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>, f64)>;
}

impl ControlFunction for PatchedClbf {
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        let p = self.point(x)?;
        Ok((p.w, p.grad, p.h))
    }
}

/// A plain smooth function, reported as its own barrier value.
pub struct SmoothFunction {
    tape: Tape,
}

impl SmoothFunction {
    pub fn new(w: &Expr, n: usize) -> Self {
        let mut outs = vec![w.clone()];
        outs.extend(w.gradient(n));
        SmoothFunction { tape: Tape::compile(&outs) }
    }
}

impl ControlFunction for SmoothFunction {
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        let v = self.tape.eval_point(x)?;
        Ok((v[0], v[1..].to_vec(), v[0]))
    }
}

/// `f` and row-major `g` compiled into one tape.
pub struct CompiledField {
    tape: Tape,
    n: usize,
    m: usize,
}

impl CompiledField {
    pub fn new(vf: &VectorField) -> Self {
        let mut outs = vf.drift().to_vec();
        outs.extend(vf.input_matrix().iter().flatten().cloned());
        CompiledField {
            tape: Tape::compile(&outs),
            n: vf.dim_state(),
            m: vf.dim_input(),
        }
    }

    /// `(f(x), g(x))` with `g` row-major.
    pub fn eval(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v = self.tape.eval_point(x)?;
        let g = v.split_off(self.n);
        Ok((v, g))
    }

    pub fn velocity(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (mut f, g) = self.eval(x)?;
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += (0..self.m).map(|j| g[i * self.m + j] * u[j]).sum::<f64>();
        }
        Ok(f)
    }
}

/// `u = -((a + sqrt(a^2 + |B|^4)) / |B|^2) B'`, or 0 when `B` vanishes and
/// the drift already decreases.
pub fn sontag(a: f64, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let bb: f64 = b.iter().map(|v| v * v).sum();
    if bb.sqrt() <= B_FLOOR {
        if a >= 0.0 {
            return Err(Error::ControlUndefined { x: x.to_vec(), lfw: a });
        }
        return Ok(vec![0.0; b.len()]);
    }
    let k = (a + (a * a + bb * bb).sqrt()) / bb;
    Ok(b.iter().map(|v| -k * v).collect())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub struct SontagController<'a> {
    w: &'a dyn ControlFunction,
    field: CompiledField,
    local: Option<LocalCheck>,
}

impl<'a> SontagController<'a> {
    pub fn new(w: &'a dyn ControlFunction, vf: &VectorField, local: Option<LocalCheck>) -> Self {
        SontagController {
            w,
            field: CompiledField::new(vf),
            local,
        }
    }

    pub fn field(&self) -> &CompiledField {
        &self.field
    }

    /// `(L_f W, L_g W)` at `x`.
    pub fn lie(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (_, grad, _) = self.w.evaluate(x)?;
        let (f, g) = self.field.eval(x)?;
        let (n, m) = (self.field.n, self.field.m);
        let a = grad.iter().zip(&f).map(|(d, fi)| d * fi).sum();
        let b = (0..m).map(|j| (0..n).map(|i| grad[i] * g[i * m + j]).sum()).collect();
        Ok((a, b))
    }

    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = norm(x);
        if r == 0.0 {
            return Ok(vec![0.0; self.field.m]);
        }
        if r < LOCAL_RADIUS {
            if let Some(local) = &self.local {
                return Ok(local.control(x));
            }
        }
        let (a, b) = self.lie(x)?;
        sontag(a, &b, x)
    }
}

/// Sontag's feedback at one point, without the near-origin switch.
pub fn sontag_control(w: &PatchedClbf, vf: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
    SontagController::new(w, vf, None).control(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    Horizon,
    Escaped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Input held over `[t_k, t_k + dt)`.
    pub u: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.x.last().expect("trajectories hold at least the initial state")
    }

    pub fn max_h(&self) -> f64 {
        self.h.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_w(&self) -> f64 {
        self.w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest one-step increase of W.
    pub fn max_w_increase(&self) -> f64 {
        self.w.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rows `t x.. u.. W h`, tab separated, with a header line. Every
    /// `stride`-th step is written, plus the last one.
    pub fn write_tsv<W: Write>(&self, mut out: W, stride: usize) -> std::io::Result<()> {
        let stride = stride.max(1);
        let n = self.x.first().map_or(0, Vec::len);
        let m = self.u.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|j| format!("u{j}")));
        header.extend(["W".to_string(), "h".to_string()]);
        writeln!(out, "{}", header.join("\t"))?;
        let last = self.t.len().saturating_sub(1);
        for k in (0..self.t.len()).filter(|&k| k % stride == 0 || k == last) {
            let mut row = vec![self.t[k]];
            row.extend(&self.x[k]);
            row.extend(&self.u[k]);
            row.extend([self.w[k], self.h[k]]);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

fn rk4_step(field: &CompiledField, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let shift = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> { base.iter().zip(k).map(|(b, k)| b + s * k).collect() };
    let k1 = field.velocity(x, u)?;
    let k2 = field.velocity(&shift(x, &k1, dt / 2.0), u)?;
    let k3 = field.velocity(&shift(x, &k2, dt / 2.0), u)?;
    let k4 = field.velocity(&shift(x, &k3, dt), u)?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Fixed-step RK4 with the input held over each step.
pub fn simulate(ctrl: &SontagController, x0: &[f64], dt: f64, t_end: f64, domain: &IntervalBox) -> Result<Trajectory> {
    if !(dt > 0.0 && t_end > dt) {
        return Err(Error::InvalidProblem(format!("bad simulation horizon dt={dt}, T={t_end}")));
    }
    if !domain.contains_point(x0) {
        return Err(Error::InvalidProblem(format!("initial state {x0:?} outside the domain")));
    }
    let blowup = BLOWUP_FACTOR * domain.max_norm_sq().sqrt();
    let steps = (t_end / dt).round() as usize;
    let mut traj = Trajectory {
        dt,
        t: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        w: Vec::new(),
        h: Vec::new(),
        termination: Termination::Horizon,
    };
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let r = norm(&x);
        if !r.is_finite() || r > blowup {
            return Err(Error::NumericBlowup { t, norm: r });
        }
        let (w, _, h) = ctrl.w.evaluate(&x)?;
        let u = ctrl.control(&x)?;
        traj.t.push(t);
        traj.x.push(x.clone());
        traj.u.push(u.clone());
        traj.w.push(w);
        traj.h.push(h);
        if r < CONVERGED_RADIUS {
            traj.termination = Termination::Converged;
            break;
        }
        if !domain.contains_point(&x) {
            traj.termination = Termination::Escaped;
            break;
        }
        if k == steps {
            break;
        }
        x = rk4_step(&ctrl.field, &x, &u, dt)?;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(f: &[&str], g: &[&[&str]]) -> VectorField {
        VectorField::new(
            f.iter().map(|s| parse(s).unwrap()).collect(),
            g.iter().map(|row| row.iter().map(|s| parse(s).unwrap()).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn formula_examples() {
        assert_eq!(sontag(-2.0, &[0.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(sontag(0.0, &[1.0], &[1.0]).unwrap(), vec![-1.0]);
        assert!(matches!(sontag(0.5, &[0.0, 1e-12], &[1.0]), Err(Error::ControlUndefined { .. })));
    }

    #[test]
    fn decrease_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u = sontag(a, &b, &[1.0]).unwrap();
            let bb: f64 = b.iter().map(|v| v * v).sum();
            let dec = a + b.iter().zip(&u).map(|(p, q)| p * q).sum::<f64>();
            let expect = -(a * a + bb * bb).sqrt();
            assert!((dec - expect).abs() <= 1e-9 * expect.abs());
        }
    }

    #[test]
    fn double_integrator_converges() {
        let vf = field(&["x2", "0"], &[&["0"], &["1"]]);
        // V = x' P x with P solving the Riccati equation for Q = I, R = 1.
        let s3 = 3f64.sqrt();
        let w = parse(&format!("{s3}*x1^2 + 2*x1*x2 + {s3}*x2^2")).unwrap();
        let sw = SmoothFunction::new(&w, 2);
        let ctrl = SontagController::new(&sw, &vf, None);
        let domain = IntervalBox::from_bounds(&[-5.0, -5.0], &[5.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x0 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let tr = simulate(&ctrl, &x0, 1e-3, 30.0, &domain).unwrap();
            assert_eq!(tr.termination, Termination::Converged, "from {x0:?}");
            assert!(tr.max_w_increase() <= 1e-9);
        }
    }

    #[test]
    fn origin_is_an_equilibrium() {
        let vf = field(&["x2", "0"], &[&["0"], &["1"]]);
        let sw = SmoothFunction::new(&parse("x1^2 + x2^2").unwrap(), 2);
        let ctrl = SontagController::new(&sw, &vf, None);
        let domain = IntervalBox::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]);
        let tr = simulate(&ctrl, &[0.0, 0.0], 1e-3, 1.0, &domain).unwrap();
        assert_eq!(tr.final_state(), &[0.0, 0.0]);
        assert_eq!(tr.u[0], vec![0.0]);
    }

    #[test]
    fn escape_and_blowup() {
        let vf = field(&["x1"], &[&["0"]]);
        let sw = SmoothFunction::new(&parse("x1^2").unwrap(), 1);
        let ctrl = SontagController::new(&sw, &vf, None);
        // g = 0 and L_f V > 0: the controller has no authority.
        let domain = IntervalBox::from_bounds(&[-1.0], &[1.0]);
        assert!(matches!(simulate(&ctrl, &[0.5], 1e-2, 5.0, &domain), Err(Error::ControlUndefined { .. })));

        let vf = field(&["x1"], &[&["1"]]);
        let sw = SmoothFunction::new(&parse("-x1^2").unwrap(), 1);
        let ctrl = SontagController::new(&sw, &vf, None);
        let tr = simulate(&ctrl, &[0.5], 1e-2, 5.0, &domain).unwrap();
        assert_eq!(tr.termination, Termination::Escaped);
    }

    #[test]
    fn rk4_error_scales_with_fourth_power() {
        // Open-loop linear decay has a closed form.
        let vf = field(&["-x1 + x2", "-x1 - x2"], &[&["0"], &["0"]]);
        let fld = CompiledField::new(&vf);
        let run = |dt: f64| {
            let mut x = vec![1.0, 0.0];
            for _ in 0..(1.0 / dt).round() as usize {
                x = rk4_step(&fld, &x, &[0.0], dt).unwrap();
            }
            x
        };
        let e = (-1.0f64).exp();
        let exact = [e * 1f64.cos(), -e * 1f64.sin()];
        let err = |x: Vec<f64>| ((x[0] - exact[0]).powi(2) + (x[1] - exact[1]).powi(2)).sqrt();
        let ratio = err(run(0.05)) / err(run(0.025));
        assert!(ratio > 16.0 / 10.0 && ratio < 160.0, "ratio {ratio}");
        assert!((ratio - 16.0).abs() < 2.0);
    }
}
