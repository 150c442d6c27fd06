use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::flow::{run_flow, FlowParams};
use crate::geometry::{CouplingSchedule, ManifoldConfig, Model};
use crate::sobolev::{estimate_ab, talenti_constant, SobolevOptions};

fn sphere() -> FlowTrajectory {
    let m = Model::new(ManifoldConfig::round_sphere(
        3,
        1.0,
        64,
        CouplingSchedule::constant(0.5),
    ))
    .unwrap();
    run_flow(&m, &FlowParams::new(0.1, 0.005)).unwrap()
}

fn torus() -> FlowTrajectory {
    let cfg = ManifoldConfig::torus_linear(
        [2.0 * PI; 3],
        [1.0; 3],
        1,
        16,
        CouplingSchedule::constant(1.0),
    );
    run_flow(&Model::new(cfg).unwrap(), &FlowParams::new(0.5, 0.01)).unwrap()
}

fn constants(times: &[f64], a: &[f64], b: &[f64], positive_case: bool) -> SobolevConstants {
    SobolevConstants {
        k: talenti_constant(3).unwrap(),
        a_convention: AConvention::Squared,
        positive_case,
        estimated: false,
        times: times.to_vec(),
        a: a.to_vec(),
        b: b.to_vec(),
        lambda0: vec![0.0; times.len()],
    }
}

fn torus_inputs(b: f64) -> ComparisonInputs {
    let k2 = talenti_constant(3).unwrap().powi(2);
    ComparisonInputs::new(&torus(), constants(&[0.0, 0.5], &[k2, k2], &[b, b], false)).unwrap()
}

fn sphere_inputs() -> ComparisonInputs {
    let k2 = talenti_constant(3).unwrap().powi(2);
    ComparisonInputs::new(&sphere(), constants(&[0.0], &[k2], &[0.0], true)).unwrap()
}

#[test]
fn lower_bound_and_chi_examples() {
    let inp = torus_inputs(0.0);
    assert!(!inp.positive_case);
    assert_relative_eq!(inp.m0, -1.0, max_relative = 1e-14);
    assert_relative_eq!(
        inp.s_lower_bound(0.3).unwrap(),
        -5.0 / 6.0,
        max_relative = 1e-14
    );
    assert_relative_eq!(inp.s_lower_bound(0.0).unwrap(), -1.0, max_relative = 1e-14);
    assert_relative_eq!(inp.chi(0.3, 0.0).unwrap(), 1.2, max_relative = 1e-14);
    assert_eq!(inp.chi(0.2, 0.2).unwrap(), 1.0);
    assert!(matches!(inp.chi(0.1, 0.2), Err(Error::BadTimeOrder { .. })));

    let pos = sphere_inputs();
    assert!(pos.positive_case);
    assert_eq!(pos.s_lower_bound(0.07).unwrap(), 0.0);
    assert_eq!(pos.chi(0.09, 0.01).unwrap(), 1.0);
}

#[test]
fn vanishing_denominator_is_flagged() {
    let inp = torus_inputs(0.0).with_m0(0.3);
    assert!(matches!(
        inp.s_lower_bound(0.45),
        Err(Error::DenominatorZero(_))
    ));
    assert!(matches!(
        inp.h_integral(0.0, 0.45),
        Err(Error::DenominatorZero(_))
    ));
}

#[test]
fn h_integral_examples() {
    let pos = sphere_inputs();
    assert_eq!(pos.h_integral(0.0, 0.08).unwrap(), 0.0);

    let flat = ComparisonInputs::new(
        &sphere(),
        constants(&[0.0, 1.0], &[2.0, 2.0], &[2.0, 2.0], true),
    )
    .unwrap();
    assert_relative_eq!(
        flat.h_integral(0.02, 0.52).unwrap(),
        0.5,
        max_relative = 1e-12
    );

    let neg = torus_inputs(0.0);
    let h = neg.h_integral(0.0, 0.3).unwrap();
    assert!((h - 9.0 / 8.0 * 1.2_f64.ln()).abs() <= 1e-8, "{h}");
}

#[test]
fn positive_case_bound_collapses_to_power_law() {
    let inp = sphere_inputs();
    let k2 = talenti_constant(3).unwrap().powi(2);
    let expect = inp.big_c_n * (2.0 * k2).powf(1.5);
    for (s, t) in [(0.0, 0.01), (0.0, 0.05), (0.02, 0.03), (0.01, 0.1)] {
        let b = inp.theorem_bound(t, s).unwrap();
        let scaled = b * (t - s).powf(1.5);
        assert!(
            (scaled - expect).abs() <= 1e-8 * expect,
            "{scaled} vs {expect}"
        );
        assert_relative_eq!(
            b,
            inp.corollary_bound_alt(t, s).unwrap(),
            max_relative = 1e-10
        );
    }
    // the two conventions differ by (K^2 / K)^{n/2} = K^{3/2}
    let ratio =
        inp.corollary_bound(0.05, 0.0).unwrap() / inp.corollary_bound_alt(0.05, 0.0).unwrap();
    assert_relative_eq!(
        ratio,
        talenti_constant(3).unwrap().powf(-1.5),
        max_relative = 1e-12
    );
    assert_relative_eq!(
        inp.c_tilde,
        (4.0 * talenti_constant(3).unwrap() / 3.0).powf(1.5),
        max_relative = 1e-14
    );
    // power law: quadrupling t - s divides by 8
    let q = inp.corollary_bound(0.02, 0.0).unwrap() / inp.corollary_bound(0.08, 0.0).unwrap();
    assert_relative_eq!(q, 8.0, max_relative = 1e-12);
}

#[test]
fn bound_scales_with_a() {
    let a = sphere_inputs();
    let mut doubled = a.clone();
    doubled.sobolev.a.iter_mut().for_each(|v| *v *= 2.0);
    let r = doubled.theorem_bound(0.06, 0.01).unwrap() / a.theorem_bound(0.06, 0.01).unwrap();
    assert_relative_eq!(r, 2.0_f64.powf(1.5), max_relative = 1e-9);
}

#[test]
fn corollary_needs_positive_case() {
    assert_eq!(
        torus_inputs(1.0).corollary_bound(0.2, 0.1),
        Err(Error::NotPositiveCase)
    );
}

/// Independent evaluation: composite Simpson on uniform grids, with `H`
/// from its closed-form curvature part plus a fine Simpson rule for `B/A`.
fn double_resolution_bound(inp: &ComparisonInputs, t: f64, s: f64, panels: usize) -> f64 {
    let m0 = inp.m0;
    let cn = inp.c_n;
    let ba = |u: f64| inp.sobolev.b_at(u) / inp.sobolev.a_at(u);
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| -> f64 {
        let h = (b - a) / n as f64;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * f(a + i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0
    };
    // -(3/4) int_s^tau du / (m0 - cn u) = (3 / (4 cn)) ln((m0 - cn tau) / (m0 - cn s))
    let h = |tau: f64| {
        simpson(&ba, s, tau, 64) + 3.0 / (4.0 * cn) * ((m0 - cn * tau) / (m0 - cn * s)).ln()
    };
    let chi = |tau: f64| (m0 - cn * tau) / (m0 - cn * s);
    let mid = 0.5 * (s + t);
    let f1 = |tau: f64| (2.0 * h(tau) / 3.0).exp() / (chi(tau).powi(2) * inp.sobolev.a_at(tau));
    let f2 = |tau: f64| (-2.0 * h(tau) / 3.0).exp() / inp.sobolev.a_at(tau);
    let i1 = simpson(&f1, s, mid, panels);
    let i2 = simpson(&f2, mid, t, panels);
    inp.big_c_n / (i1 * i2).powf(0.75)
}

#[test]
fn theorem_bound_matches_double_resolution_quadrature() {
    let traj = torus();
    let est = estimate_ab(
        &traj,
        &[0.0, 0.25, 0.5],
        &SobolevOptions {
            probe_fiber: 16,
            ..Default::default()
        },
    )
    .unwrap();
    let inp = ComparisonInputs::new(&traj, est).unwrap();
    for (s, t) in [(0.0, 0.2), (0.1, 0.5), (0.3, 0.45)] {
        let b = inp.theorem_bound(t, s).unwrap();
        let coarse = double_resolution_bound(&inp, t, s, 200);
        let fine = double_resolution_bound(&inp, t, s, 400);
        assert!((coarse - fine).abs() <= 1e-9 * fine);
        assert!((b - fine).abs() <= 1e-6 * fine, "{b} vs {fine}");
        let parts = inp.theorem_parts(t, s).unwrap();
        assert_relative_eq!(
            (parts.p_bound * parts.q_bound).sqrt(),
            parts.bound,
            max_relative = 1e-12
        );
        assert!(inp.theorem_halving_change(t, s).unwrap() <= 1e-7);
    }
}

#[test]
fn bad_curves_are_reported() {
    let mut inp = torus_inputs(1.0);
    inp.sobolev.a = vec![-1.0, -1.0];
    assert!(matches!(
        inp.theorem_bound(0.2, 0.1),
        Err(Error::NonpositiveIntegral(_))
    ));
}

#[test]
fn maximum_principle_margins() {
    let traj = torus();
    let inp = torus_inputs(0.0);
    assert!(inp.s_comparison_margin(&traj).unwrap() >= -1e-6);
    let traj = sphere();
    assert!(sphere_inputs().s_comparison_margin(&traj).unwrap() >= -1e-6);
}

#[test]
fn sphere_verification_passes_with_both_conventions() {
    let traj = sphere();
    let inp = sphere_inputs();
    let samples = [
        Sample {
            x: [64, 0, 0],
            t: 0.05,
            y: [0, 0, 0],
            s: 0.0,
        },
        Sample {
            x: [5, 0, 0],
            t: 0.08,
            y: [3, 0, 0],
            s: 0.02,
        },
        Sample {
            x: [0, 0, 0],
            t: 0.03,
            y: [0, 0, 0],
            s: 0.0,
        },
    ];
    let rep = verify(&traj, &inp, &samples, &KernelOptions::default()).unwrap();
    assert!(rep.all_pass);
    for r in &rep.rows {
        assert!(
            r.ratio_corollary.unwrap() >= 1.0 && r.ratio_corollary_alt.unwrap() >= 1.0,
            "{r:?}"
        );
        assert!(
            r.cauchy_schwarz_ok && r.j_bound_ok && r.p_bound_ok && r.q_bound_ok,
            "{r:?}"
        );
        assert!((r.jtilde_s - 1.0).abs() < 1e-6);
    }
    assert_eq!(
        rep.rows.iter().map(|r| r.sample).collect::<Vec<_>>(),
        samples
    );
}

#[test]
fn torus_verification_with_estimated_constants() {
    let traj = torus();
    let est = estimate_ab(
        &traj,
        &[0.0, 0.25, 0.5],
        &SobolevOptions {
            probe_fiber: 16,
            ..Default::default()
        },
    )
    .unwrap();
    let inp = ComparisonInputs::new(&traj, est).unwrap();
    let samples = [
        Sample {
            x: [1, 2, 3],
            t: 0.3,
            y: [1, 2, 3],
            s: 0.1,
        },
        Sample {
            x: [8, 0, 4],
            t: 0.5,
            y: [0, 8, 12],
            s: 0.0,
        },
    ];
    let rep = verify(&traj, &inp, &samples, &KernelOptions::default()).unwrap();
    for r in &rep.rows {
        assert!(r.ratio_theorem >= 1.0, "{r:?}");
        assert!(r.cauchy_schwarz_ok && r.j_bound_ok, "{r:?}");
        assert!(r.bound_corollary.is_none());
    }
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(
        "x,y,s,t,G_actual,bound_theorem,bound_corollary,ratio_theorem,ratio_corollary,m0,chi_mid,H_mid,J_t,Jtilde_s,P_mid,Q_mid,pass\n"
    ));
    let mut json = Vec::new();
    rep.write_json(&mut json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

proptest! {
    #[test]
    fn chi_is_a_cocycle(m0 in -5.0..-0.1f64, s in 0.0..1.0f64, d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let inp = torus_inputs(0.0).with_m0(m0);
        let (a, b) = (s + d1, s + d1 + d2);
        let lhs = inp.chi(b, s).unwrap();
        let rhs = inp.chi(b, a).unwrap() * inp.chi(a, s).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs());
        // chi >= 1 in the negative case: the mass bound grows
        prop_assert!(lhs >= 1.0);
    }

    #[test]
    fn h_is_additive(s in 0.0..0.2f64, d1 in 0.0..0.15f64, d2 in 0.0..0.15f64, b in 0.0..3.0f64) {
        let inp = torus_inputs(b);
        let (a, c) = (s + d1, s + d1 + d2);
        let whole = inp.h_integral(s, c).unwrap();
        let parts = inp.h_integral(s, a).unwrap() + inp.h_integral(a, c).unwrap();
        prop_assert!((whole - parts).abs() <= 3e-8);
    }
}
