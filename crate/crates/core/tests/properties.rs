use proptest::prelude::*;

use clbf::expr::{log_sum_exp, parse, Expr, Tape};
use clbf::interval::{eval_interval, Interval, IntervalBox};
use clbf::patch::{bump, bump_slope};

fn constant() -> impl Strategy<Value = Expr> {
    (-300i32..300).prop_map(|c| Expr::constant(c as f64 / 100.0))
}

/// Random trees over `n` variables, at most `depth` levels deep.
fn arb_expr(n: usize, depth: u32) -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![(0..n).prop_map(Expr::var), constant()];
    leaf.prop_recursive(depth, 64, 2, |e| {
        prop_oneof![
            (e.clone(), e.clone()).prop_map(|(a, b)| a.add(&b)),
            (e.clone(), e.clone()).prop_map(|(a, b)| a.sub(&b)),
            (e.clone(), e.clone()).prop_map(|(a, b)| a.mul(&b)),
            (e.clone(), e.clone()).prop_map(|(a, b)| a.div(&b)),
            (e.clone(), 2u32..4).prop_map(|(a, k)| a.powi(k)),
            e.clone().prop_map(|a| a.neg()),
            e.clone().prop_map(|a| a.sin()),
            e.clone().prop_map(|a| a.cos()),
            e.clone().prop_map(|a| a.exp()),
            e.clone().prop_map(|a| a.log()),
            (e.clone(), e.clone(), 1u32..20).prop_map(|(a, b, t)| Expr::log_sum_exp(t as f64 / 2.0, vec![a, b])),
        ]
    })
}

fn point(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, n)
}

fn arb_box(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-2.0..2.0f64, 0.0..1.5f64), n).prop_map(|v| v.into_iter().map(|(lo, w)| (lo, lo + w)).unzip())
}

/// Point of the box at relative position `t` in each coordinate.
fn inside(lo: &[f64], hi: &[f64], t: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).zip(t).map(|((l, h), s)| l + (h - l) * s).collect()
}

fn finite(e: &Expr, x: &[f64]) -> Option<f64> {
    e.eval(x).ok().filter(|v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn derivative_matches_central_differences(e in arb_expr(2, 6), x in point(2, 1.0), var in 0..2usize) {
        let s = 1e-6;
        let f0 = finite(&e, &x);
        let d = finite(&e.differentiate(var), &x);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[var] += s;
        xm[var] -= s;
        let (fp, fm) = (finite(&e, &xp), finite(&e, &xm));
        prop_assume!(f0.is_some() && d.is_some() && fp.is_some() && fm.is_some());
        let (f0, d, fp, fm) = (f0.unwrap(), d.unwrap(), fp.unwrap(), fm.unwrap());
        // Away from poles and kinks of the floating-point evaluation only.
        prop_assume!(d.abs() > 1e-3 && d.abs() < 1e4 && f0.abs() < 1e4);
        let second = finite(&e.differentiate(var).differentiate(var), &x).unwrap_or(f64::INFINITY);
        prop_assume!(second.abs() < 1e6);
        let fd = (fp - fm) / (2.0 * s);
        // Rounding in the difference quotient is about ulp(f) / s.
        let roundoff = 4.0 * f64::EPSILON * (f0.abs() + 1.0) / s;
        prop_assert!((fd - d).abs() <= 1e-5 * d.abs() + roundoff, "{e}: d = {d}, fd = {fd}");
    }

    #[test]
    fn printing_round_trips(e in arb_expr(3, 5), x in point(3, 2.0)) {
        let text = e.to_string();
        let back = parse(&text).unwrap();
        prop_assert_eq!(back.to_string(), text.clone());
        match (e.eval(&x), back.eval(&x)) {
            (Ok(a), Ok(b)) => prop_assert!(a == b || (a.is_nan() && b.is_nan()), "{text}: {a} vs {b}"),
            (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn gradient_is_the_vector_of_partials(e in arb_expr(3, 4), x in point(3, 1.0)) {
        let g = e.gradient(3);
        for (i, gi) in g.iter().enumerate() {
            let a = gi.eval(&x);
            let b = e.differentiate(i).eval(&x);
            prop_assert_eq!(a.is_ok(), b.is_ok());
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(a == b || (a.is_nan() && b.is_nan()));
            }
        }
    }

    #[test]
    fn contraction_keeps_every_solution(
        e in arb_expr(2, 4),
        (lo, hi) in arb_box(2),
        c in -2.0..2.0f64,
        w in 0.0..1.0f64,
        samples in prop::collection::vec(point(2, 1.0), 200),
    ) {
        let range = Interval::new(c - w, c + w);
        let tape = Tape::compile(&[e.clone()]);
        let mut dims: Vec<Interval> = lo.iter().zip(&hi).map(|(&l, &h)| Interval::new(l, h)).collect();
        let mut buf = Vec::new();
        let Ok(feasible) = tape.contract(&mut dims, &[range], &mut buf) else {
            return Ok(());
        };
        for t in samples {
            let t: Vec<f64> = t.iter().map(|v| (v + 1.0) / 2.0).collect();
            let x = inside(&lo, &hi, &t);
            if let Some(v) = finite(&e, &x) {
                if range.contains(v) {
                    prop_assert!(feasible, "{e} = {v} in {range:?} at {x:?} but the box was discarded");
                    prop_assert!(dims.iter().zip(&x).all(|(d, xi)| d.contains(*xi)), "{e}: {x:?} cut from {dims:?}");
                }
            }
        }
    }

    #[test]
    fn bump_is_monotone_between_zero_and_one(eps in 1e-3..0.9f64, s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let (a, b) = (1.0 - eps * s.max(t), 1.0 - eps * s.min(t));
        let (ba, bb) = (bump(a, eps), bump(b, eps));
        prop_assert!((0.0..=1.0).contains(&ba) && (0.0..=1.0).contains(&bb));
        prop_assert!(ba <= bb);
        prop_assert!(bump_slope(a, eps) >= 0.0);
    }

    #[test]
    fn log_sum_exp_sandwich(vals in prop::collection::vec(-50.0..50.0f64, 1..40), tau in 0.1..50.0f64) {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = log_sum_exp(tau, &vals);
        let gap = (vals.len() as f64).ln() / tau;
        prop_assert!(m <= s + 1e-9 && s <= m + gap + 1e-9, "max {m}, softmax {s}, gap {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn interval_evaluation_encloses_points(e in arb_expr(3, 5), (lo, hi) in arb_box(3), t in prop::collection::vec(0.0..=1.0f64, 3)) {
        let b = IntervalBox::from_bounds(&lo, &hi);
        let x = inside(&lo, &hi, &t);
        let Some(v) = finite(&e, &x) else { return Ok(()) };
        if let Ok(iv) = eval_interval(&e, &b) {
            prop_assert!(iv.contains(v), "{e} = {v} at {x:?} outside {iv:?}");
        }
        if let Ok(ivs) = Tape::compile(&[e.clone()]).eval_interval(b.dims()) {
            prop_assert!(ivs[0].contains(v), "tape: {e} = {v} at {x:?} outside {:?}", ivs[0]);
        }
    }

    #[test]
    fn interval_operations_enclose_points(
        (a0, a1) in (-5.0..5.0f64, 0.0..3.0f64),
        (b0, b1) in (-5.0..5.0f64, 0.0..3.0f64),
        s in 0.0..=1.0f64,
        t in 0.0..=1.0f64,
        k in 1u32..6,
    ) {
        let (a, b) = (Interval::new(a0, a0 + a1), Interval::new(b0, b0 + b1));
        let (x, y) = (a0 + a1 * s, b0 + b1 * t);
        prop_assert!(a.add(b).contains(x + y));
        prop_assert!(a.sub(b).contains(x - y));
        prop_assert!(a.mul(b).contains(x * y));
        prop_assert!(a.neg().contains(-x));
        prop_assert!(a.powi(k).contains(x.powi(k as i32)));
        prop_assert!(a.sin().contains(x.sin()));
        prop_assert!(a.cos().contains(x.cos()));
        prop_assert!(a.exp().contains(x.exp()));
        if y != 0.0 {
            if let Ok(q) = a.div(b) {
                prop_assert!(q.contains(x / y), "{x} / {y} outside {q:?}");
            }
        }
        if x > 0.0 {
            if let Ok(l) = a.ln() {
                prop_assert!(l.contains(x.ln()));
            }
        }
        let lse = Interval::log_sum_exp(2.5, &[a, b]);
        prop_assert!(lse.contains(log_sum_exp(2.5, &[x, y])));
    }
}
