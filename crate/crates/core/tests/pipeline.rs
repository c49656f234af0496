use std::path::{Path, PathBuf};

use clbf::error::Error;
use clbf::expr::parse;
use clbf::interval::eval_interval;
use clbf::pipeline::{self, cmd_synthesize, cmd_verify, exit_code, grid_certificate, rebuild, simulate_certificate, Overrides, EXIT_OK};
use clbf::problem::{Certificate, ProblemSpec, Status};
use clbf::verifier::CheckOptions;

fn bench(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks").join(format!("{name}.spec"))
}

fn synth(name: &str) -> Certificate {
    let cert = pipeline::synthesize(&ProblemSpec::load(&bench(name)).unwrap(), &CheckOptions::default()).unwrap();
    assert_eq!(cert.status, Status::Certified, "{name}: {:?}", cert.failure);
    cert
}

fn verify_code(cert: &Certificate, dir: &Path) -> i32 {
    let path = dir.join("cert.json");
    cert.save(&path).unwrap();
    match cmd_verify(&path, &CheckOptions::default()) {
        Ok((_, code)) => code,
        Err(e) => exit_code(&e),
    }
}

/// Drops fields that legitimately differ between runs.
fn strip_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("created");
            m.remove("wall_time_s");
            m.values_mut().for_each(strip_clock);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_clock),
        _ => {}
    }
}

#[test]
fn toy_certificate_replays_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.cert.json");
    let (cert, code) = cmd_synthesize(&bench("ex1_toy"), &out, &Overrides::default(), &CheckOptions::default()).unwrap();
    assert_eq!(code, EXIT_OK);
    let back = Certificate::load(&out).unwrap();
    assert_eq!(back, cert);
    assert_eq!(Certificate::from_json(&cert.to_json()).unwrap(), cert);
    assert_eq!(cmd_verify(&out, &CheckOptions::default()).unwrap().1, EXIT_OK);
}

#[test]
fn synthesis_is_deterministic_up_to_clocks() {
    let json = |c: &Certificate| {
        let mut v = serde_json::to_value(c).unwrap();
        strip_clock(&mut v);
        v
    };
    assert_eq!(json(&synth("ex1_toy")), json(&synth("ex1_toy")));
}

#[test]
fn problem_files_round_trip() {
    for name in ["ex1_toy", "ex2_nonlinear", "ex3_linear", "ex4_power"] {
        let spec = ProblemSpec::load(&bench(name)).unwrap();
        let back = ProblemSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec, "{name}");
        assert_eq!(back.digest(), spec.digest());
    }
}

#[test]
fn doubled_band_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cert = synth("ex1_toy");
    let band = cert.compatibility.as_mut().unwrap();
    band.epsilon *= 2.0;
    cert.patched.as_mut().unwrap().epsilon = band.epsilon;
    assert_ne!(verify_code(&cert, dir.path()), EXIT_OK);
}

#[test]
fn unsafe_origin_is_an_ingestion_error() {
    let text = std::fs::read_to_string(bench("ex1_toy")).unwrap().replace("\"-sin(x1) - cos(x1) - x2\"", "\"2 + x1\"");
    let spec = ProblemSpec::from_toml(&text).unwrap();
    let err = pipeline::synthesize(&spec, &CheckOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidProblem(_)), "{err}");
    assert_eq!(exit_code(&err), 1);

    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("bad.spec"), dir.path().join("bad.json"));
    std::fs::write(&src, text).unwrap();
    assert!(cmd_synthesize(&src, &out, &Overrides::default(), &CheckOptions::default()).is_err());
    assert!(!out.exists());
}

#[test]
fn zero_trajectories_give_an_empty_summary() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate_certificate(&synth("ex1_toy"), 0, 1, Some(dir.path())).unwrap();
    assert_eq!((s.count, s.trajectories.len()), (0, 0));
    assert!(s.passed());
    assert!(dir.path().join("summary.tsv").exists());
}

#[test]
fn toy_grid_has_one_row_per_cell_and_a_tight_level_set() {
    let dir = tempfile::tempdir().unwrap();
    let cert = synth("ex1_toy");
    let g = grid_certificate(&cert, 400, dir.path()).unwrap();
    assert_eq!(g.rows, 160_000);
    let text = std::fs::read_to_string(dir.path().join("grid.tsv")).unwrap();
    assert_eq!(text.lines().count(), 160_001);
    assert!(!g.segments.is_empty());

    // Segment ends lie on grid edges whose ends straddle h = 1, so
    // |h - 1| is at most the cell side times a bound on |dh/dx_i|.
    let rb = rebuild(&cert).unwrap();
    let h = rb.barrier.h_sm();
    let d = &rb.problem.domain;
    let lip: Vec<f64> = (0..2)
        .map(|i| {
            let iv = eval_interval(&h.differentiate(i), d).unwrap();
            iv.lo().abs().max(iv.hi().abs())
        })
        .collect();
    let side: Vec<f64> = d.dims().iter().map(|iv| iv.width() / 399.0).collect();
    let bound = lip[0] * side[0] + lip[1] * side[1];
    for seg in &g.segments {
        for p in seg {
            let r = (h.eval(p).unwrap() - 1.0).abs();
            assert!(r <= bound, "{p:?}: residual {r} above {bound}");
        }
    }
}

#[test]
fn linear_grid_excludes_the_unsafe_half_plane() {
    let dir = tempfile::tempdir().unwrap();
    let cert = synth("ex3_linear");
    grid_certificate(&cert, 200, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("grid.tsv")).unwrap();
    let mut inside = 0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').map(|s| s.parse().unwrap()).collect();
        let (x1, x2, h, w) = (v[0], v[1], v[2], v[3]);
        if h <= 1.0 {
            inside += 1;
            assert!(w <= 1.0);
            assert!(-2.0 - x1 - x2 <= 1.0, "({x1}, {x2}) in the safe region");
        }
    }
    assert!(inside > 1000);
}

#[test]
fn grid_rejects_higher_dimensions() {
    let spec = ProblemSpec::from_toml(
        r#"
schema = 1
name = "decoupled"
[system]
n = 4
m = 4
f = ["-x1", "-x2", "-x3", "-x4"]
g = [["1", "0", "0", "0"], ["0", "1", "0", "0"], ["0", "0", "1", "0"], ["0", "0", "0", "1"]]
[domain]
lower = [-2.0, -2.0, -2.0, -2.0]
upper = [2.0, 2.0, 2.0, 2.0]
[safety]
constraints = ["x1"]
[parameters]
tau = 10.0
clf = "x1^2 + x2^2 + x3^2 + x4^2"
"#,
    )
    .unwrap();
    let cert = pipeline::synthesize(&spec, &CheckOptions::default()).unwrap();
    assert_eq!(cert.status, Status::Certified, "{:?}", cert.failure);
    let dir = tempfile::tempdir().unwrap();
    let err = grid_certificate(&cert, 10, dir.path()).unwrap_err();
    assert!(matches!(err, Error::UnsupportedDimension(4)), "{err}");
    assert_eq!(exit_code(&err), 1);
}

#[test]
fn converter_trajectories_stay_safe() {
    let cert = synth("ex4_power");
    let s = simulate_certificate(&cert, 50, cert.spec.simulation.seed, None).unwrap();
    assert_eq!(s.safe, 50, "max h {}", s.max_h);
    assert!(s.max_w_increase <= 1e-6);
}

#[test]
fn suite_is_safe_at_the_default_step() {
    for name in ["ex1_toy", "ex2_nonlinear", "ex3_linear"] {
        let cert = synth(name);
        assert_eq!(cert.spec.simulation.dt, 1e-3);
        let s = simulate_certificate(&cert, 50, 7, None).unwrap();
        assert_eq!(s.safe, 50, "{name}: max h {}", s.max_h);
    }
}

/// The converter's input gains make a held input unstable at the default
/// step: its problem file declares a smaller one.
#[test]
fn converter_needs_a_smaller_step() {
    let mut cert = synth("ex4_power");
    assert!(cert.spec.simulation.dt < 1e-5);
    cert.spec.simulation.dt = 1e-3;
    cert.spec.simulation.horizon = 0.1;
    let s = simulate_certificate(&cert, 5, 1, None).unwrap();
    assert!(s.trajectories.iter().all(|t| t.error.is_some() || t.max_h > 1.0));
}

#[test]
fn certified_lyapunov_candidate_is_the_one_given() {
    let cert = synth("ex3_linear");
    let v = parse(&cert.clf.unwrap().v).unwrap();
    assert_eq!(v.eval(&[1.5, -2.0]).unwrap(), 1.5f64.powi(2) + 4.0);
}
