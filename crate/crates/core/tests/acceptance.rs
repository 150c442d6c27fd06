//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its PASS/FAIL line even when an earlier one fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rhflow_core::bounds::{verify, BoundReport, ComparisonInputs};
use rhflow_core::config::RunConfig;
use rhflow_core::flow::{run_flow, FlowParams, FlowTrajectory};
use rhflow_core::geometry::{curvature, CouplingSchedule, ManifoldConfig, Model};
use rhflow_core::heatkernel::{
    forward_solve, mass_diagnostics, max_relative_error, semigroup_check, sphere_oracle,
    theta_oracle, KernelOptions, KernelSource,
};
use rhflow_core::sobolev::{
    bubble_quotient_sup, estimate_ab, lambda0_alpha, talenti_constant, AConvention,
    SobolevConstants,
};

type Failure = Box<dyn std::error::Error + Send + Sync>;
type Outcome = Result<Vec<Check>, Failure>;
type Criterion = (&'static str, fn() -> Outcome);

struct Check {
    ok: bool,
    what: String,
}

fn check(ok: bool, what: impl Into<String>) -> Check {
    Check {
        ok,
        what: what.into(),
    }
}

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SHIPPED: [&str; 3] = ["sphere.json", "torus.json", "coupled_circle.json"];

/// Flow and estimated Sobolev constants of a shipped config, computed once.
struct Fixture {
    cfg: RunConfig,
    traj: FlowTrajectory,
    constants: SobolevConstants,
    estimate_time: Duration,
}

fn fixture(name: &'static str) -> &'static Fixture {
    static CELLS: [OnceLock<Fixture>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let idx = SHIPPED.iter().position(|n| *n == name).unwrap();
    CELLS[idx].get_or_init(|| {
        let cfg = config(name);
        let traj = cfg.trajectory().unwrap();
        let clock = Instant::now();
        let constants = cfg.sobolev_constants(&traj, None).unwrap();
        Fixture {
            cfg,
            traj,
            constants,
            estimate_time: clock.elapsed(),
        }
    })
}

fn with_grid(name: &str, grid: usize) -> RunConfig {
    let mut cfg = config(name);
    cfg.manifold.grid = grid;
    cfg
}

/// Sharp Sobolev constant for n = 3 written out by hand:
/// `(1 / sqrt(3 pi)) (Gamma(3) / Gamma(3/2))^{1/3}` with `Gamma(3/2) = sqrt(pi) / 2`.
fn talenti_three() -> f64 {
    (1.0 / (3.0 * PI).sqrt()) * (4.0 / PI.sqrt()).cbrt()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1() -> Outcome {
    let mut out = Vec::new();
    for (n, r0) in [(3usize, 1.0_f64), (4, 1.5)] {
        let clock = Instant::now();
        let model = Model::new(ManifoldConfig::round_sphere(
            n,
            r0,
            32,
            CouplingSchedule::constant(0.3),
        ))?;
        let traj = run_flow(&model, &FlowParams::new(0.2, 0.01))?;
        let mut worst = 0.0_f64;
        for k in 0..=40 {
            let t = 0.2 * k as f64 / 40.0;
            let exact = r0 * r0 - 2.0 * (n as f64 - 1.0) * t;
            worst = worst.max(rel(traj.state_at(t)?.conformal(), exact));
        }
        let elapsed = clock.elapsed();
        out.push(check(
            worst <= 1e-8,
            format!("sphere n={n}: max rel error {worst:.2e}"),
        ));
        out.push(check(
            elapsed < Duration::from_secs(1),
            format!("sphere n={n}: runtime {elapsed:.2?}"),
        ));
    }

    let clock = Instant::now();
    let (l1, winding) = (3.0_f64, 2_i64);
    let schedule = CouplingSchedule::linear_floor(1.2, 4.0, 0.5);
    let g0 = [1.3, 0.9, 1.1];
    let cfg = ManifoldConfig::torus_linear([l1, 4.0, 5.0], g0, winding, 16, schedule);
    let traj = run_flow(&Model::new(cfg)?, &FlowParams::new(0.2, 0.01))?;
    let kappa = 2.0 * PI * winding as f64 / l1;
    // alpha = 1.2 - 4 t until t = 0.175, then 0.5
    let int_alpha = |t: f64| {
        let k = 0.175;
        if t <= k {
            1.2 * t - 2.0 * t * t
        } else {
            1.2 * k - 2.0 * k * k + 0.5 * (t - k)
        }
    };
    let mut worst = 0.0_f64;
    for k in 0..=40 {
        let t = 0.2 * k as f64 / 40.0;
        let dofs = traj.dofs_at(t)?;
        let exact = [g0[0] + 2.0 * kappa * kappa * int_alpha(t), g0[1], g0[2]];
        for i in 0..3 {
            worst = worst.max(rel(dofs[i], exact[i]));
        }
    }
    let elapsed = clock.elapsed();
    out.push(check(
        worst <= 1e-8,
        format!("torus: max rel error {worst:.2e}"),
    ));
    out.push(check(
        elapsed < Duration::from_secs(1),
        format!("torus: runtime {elapsed:.2?}"),
    ));
    Ok(out)
}

fn criterion_2() -> Outcome {
    let mut out = Vec::new();
    let opts = KernelOptions::default();
    let sphere = with_grid("sphere.json", 512).trajectory()?;
    let torus = with_grid("torus.json", 256).trajectory()?;
    for dt in [0.01, 0.05, 0.1, 0.2] {
        let clock = Instant::now();
        let pde = forward_solve(&sphere, [0; 3], 0.0, dt, &opts)?;
        let err = max_relative_error(&pde, &sphere_oracle(&sphere, [0; 3], 0.0, dt, &opts)?)?;
        let elapsed = clock.elapsed();
        out.push(check(
            err <= 1e-3,
            format!("sphere N_theta=512, t-s={dt}: {err:.2e}"),
        ));
        out.push(check(
            elapsed < Duration::from_secs(30),
            format!("sphere t-s={dt}: {elapsed:.2?}"),
        ));

        let clock = Instant::now();
        let (y, s) = ([17, 130, 201], 0.25);
        let pde = forward_solve(&torus, y, s, s + dt, &opts)?;
        let err = max_relative_error(&pde, &theta_oracle(&torus, y, s, s + dt, &opts)?)?;
        let elapsed = clock.elapsed();
        out.push(check(
            err <= 1e-3,
            format!("torus N=256, t-s={dt}: {err:.2e}"),
        ));
        out.push(check(
            elapsed < Duration::from_secs(30),
            format!("torus t-s={dt}: {elapsed:.2?}"),
        ));
    }
    Ok(out)
}

fn criterion_3() -> Outcome {
    let mut out = Vec::new();
    let spectral = KernelOptions {
        source: KernelSource::Oracle,
        ..KernelOptions::default()
    };
    let sphere = &fixture("sphere.json").traj;
    let torus = &fixture("torus.json").traj;
    let cases = [
        ("sphere", sphere, [5, 0, 0], 0.12, [200, 0, 0], 0.02, 0.05),
        ("sphere", sphere, [0, 0, 0], 0.2, [0, 0, 0], 0.1, 0.17),
        ("torus", torus, [3, 40, 7], 0.4, [60, 2, 9], 0.1, 0.3),
        ("torus", torus, [0, 0, 0], 0.5, [0, 0, 0], 0.0, 0.25),
    ];
    for (name, traj, x, t, y, s, m) in cases {
        let mass = mass_diagnostics(traj, x, t, y, s, &spectral)?;
        let dev = (mass.jtilde_s - 1.0).abs();
        out.push(check(
            dev <= 1e-6,
            format!("{name} spectral |Jtilde - 1| = {dev:.2e}"),
        ));
        let sg = semigroup_check(traj, x, t, y, s, m, &spectral)?;
        out.push(check(
            sg.residual <= 1e-8,
            format!("{name} spectral semigroup residual {:.2e}", sg.residual),
        ));
    }

    let coupled = &fixture("coupled_circle.json");
    let pde = KernelOptions {
        source: KernelSource::Forward,
        ..coupled.cfg.kernel
    };
    for (x, t, y, s, m) in [
        ([0, 0, 0], 0.1, [0, 0, 0], 0.0, 0.05),
        ([20, 3, 9], 0.2, [5, 60, 30], 0.05, 0.1),
    ] {
        let mass = mass_diagnostics(&coupled.traj, x, t, y, s, &pde)?;
        let dev = (mass.jtilde_s - 1.0).abs();
        out.push(check(
            dev <= 1e-3,
            format!("coupled PDE |Jtilde - 1| = {dev:.2e}"),
        ));
        let sg = semigroup_check(&coupled.traj, x, t, y, s, m, &pde)?;
        out.push(check(
            sg.residual <= 1e-3,
            format!("coupled PDE semigroup residual {:.2e}", sg.residual),
        ));
    }
    Ok(out)
}

fn criterion_4() -> Outcome {
    let mut out = Vec::new();
    let c_n = 2.0 / 3.0;
    for name in SHIPPED {
        let fx = fixture(name);
        let inf_s0 = curvature(&fx.traj.initial_state())?.min_s();
        let positive = inf_s0 >= 0.0;
        let m0 = 1.0 / inf_s0;
        let mut worst = f64::INFINITY;
        for i in 0..fx.traj.checkpoints().len() {
            let st = fx.traj.checkpoint_state(i);
            let floor = if positive {
                0.0
            } else {
                1.0 / (m0 - c_n * st.time)
            };
            worst = worst.min(curvature(&st)?.min_s() - floor);
        }
        out.push(check(
            worst >= -1e-6,
            format!("{name}: min over checkpoints of S - lower bound = {worst:.3e}"),
        ));

        let chi = |t: f64, s: f64| {
            if positive {
                1.0
            } else {
                (m0 - c_n * t) / (m0 - c_n * s)
            }
        };
        let mut worst = f64::INFINITY;
        for smp in &fx.cfg.samples {
            let mass = mass_diagnostics(&fx.traj, smp.x, smp.t, smp.y, smp.s, &fx.cfg.kernel)?;
            worst = worst.min(chi(smp.t, smp.s).powf(1.5) - mass.j_t);
        }
        out.push(check(
            worst >= -1e-6,
            format!("{name}: min over samples of chi^(3/2) - J = {worst:.3e}"),
        ));
    }
    Ok(out)
}

fn criterion_5() -> Outcome {
    let mut out = Vec::new();
    let clock = Instant::now();
    let cfg = config("torus.json");
    let traj = cfg.trajectory()?;
    let constants = cfg.sobolev_constants(&traj, None)?;
    let inputs = ComparisonInputs::new(&traj, constants)?;
    let report = verify(&traj, &inputs, &cfg.samples, &cfg.kernel)?;
    let elapsed = clock.elapsed();
    out.push(check(
        rel(inputs.m0, -1.0) < 1e-12,
        format!("m0 = {}", inputs.m0),
    ));
    out.push(check(inputs.sobolev.estimated, "A, B are probe estimates"));
    for r in &report.rows {
        let smp = r.sample;
        let label = format!("x={:?} t={} y={:?} s={}", smp.x, smp.t, smp.y, smp.s);
        out.push(check(
            r.ratio_theorem >= 1.0,
            format!("{label}: ratio_theorem {:.4e}", r.ratio_theorem),
        ));
        let cs = (r.p_mid * r.q_mid).sqrt();
        out.push(check(
            r.g_actual <= cs * (1.0 + 1e-6),
            format!("{label}: G {:.4e} <= sqrt(PQ) {cs:.4e}", r.g_actual),
        ));
    }
    out.push(check(
        elapsed < Duration::from_secs(300),
        format!("verify runtime {elapsed:.2?}"),
    ));
    Ok(out)
}

fn criterion_6() -> Outcome {
    let mut out = Vec::new();
    let k = talenti_three();
    let c_tilde = (4.0 * k / 3.0).powf(1.5);
    let c_tilde_alt = (4.0 * k * k / 3.0).powf(1.5);
    let fx = fixture("sphere.json");
    for convention in [AConvention::Squared, AConvention::Linear] {
        let mut cfg = fx.cfg.clone();
        cfg.sobolev.a_convention = convention;
        let inputs = cfg.comparison_inputs(&fx.traj)?;
        out.push(check(
            inputs.positive_case,
            format!("{convention:?}: positive case"),
        ));
        out.push(check(
            rel(inputs.c_tilde, c_tilde) < 1e-12,
            format!("{convention:?}: C~_3 = {:.10}", inputs.c_tilde),
        ));
        let report: BoundReport = verify(&fx.traj, &inputs, &cfg.samples, &cfg.kernel)?;
        out.push(check(
            report.a_convention == convention,
            format!("report states convention {:?}", report.a_convention),
        ));
        for r in &report.rows {
            let scaled = r.g_actual * (r.sample.t - r.sample.s).powf(1.5);
            out.push(check(
                scaled <= c_tilde && scaled <= c_tilde_alt,
                format!(
                    "{convention:?} t={} s={}: G (t-s)^(3/2) = {scaled:.4e}",
                    r.sample.t, r.sample.s
                ),
            ));
        }
        let scaled: Vec<f64> = [(0.05, 0.0), (0.1, 0.02), (0.2, 0.0), (0.2, 0.15)]
            .iter()
            .map(|&(t, s)| inputs.theorem_bound(t, s).map(|b| b * (t - s).powf(1.5)))
            .collect::<Result<_, _>>()?;
        let spread = scaled
            .iter()
            .map(|v| rel(*v, scaled[0]))
            .fold(0.0, f64::max);
        out.push(check(
            spread <= 1e-8,
            format!("{convention:?}: theorem_bound (t-s)^(3/2) spread {spread:.2e}"),
        ));
    }
    Ok(out)
}

fn criterion_7() -> Outcome {
    let mut out = Vec::new();
    let sphere = Model::new(ManifoldConfig::round_sphere(
        3,
        1.0,
        256,
        CouplingSchedule::constant(0.5),
    ))?;
    let l = lambda0_alpha(&sphere.initial_state()?)?;
    out.push(check(
        (l - 6.0).abs() <= 1e-6,
        format!("unit S^3 lambda0 = {l:.12}"),
    ));
    let torus = fixture("torus.json");
    let l = lambda0_alpha(&torus.traj.initial_state())?;
    out.push(check(
        (l + 1.0).abs() <= 1e-6,
        format!("torus reference lambda0 = {l:.12}"),
    ));
    let (k, sup) = (talenti_constant(3)?, bubble_quotient_sup(3)?);
    out.push(check(
        rel(k, talenti_three()) < 1e-13,
        format!("K(3,2) = {k:.12}"),
    ));
    out.push(check(
        rel(sup, k) <= 5e-3,
        format!("bubble sup {sup:.8} vs K {k:.8}: {:.2e}", rel(sup, k)),
    ));
    Ok(out)
}

fn criterion_8() -> Outcome {
    let mut out = Vec::new();
    for name in SHIPPED {
        let fx = fixture(name);
        let inputs = ComparisonInputs::new(&fx.traj, fx.constants.clone())?;
        let worst = fx
            .cfg
            .samples
            .iter()
            .map(|s| inputs.theorem_halving_change(s.t, s.s))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        out.push(check(
            worst <= 1e-7,
            format!("{name}: quadrature halving change {worst:.2e}"),
        ));
    }

    let plain = KernelOptions {
        richardson: false,
        ..KernelOptions::default()
    };
    let sphere_err = |m: usize| -> Result<f64, Failure> {
        let traj = with_grid("sphere.json", m).trajectory()?;
        let pde = forward_solve(&traj, [0; 3], 0.05, 0.1, &plain)?;
        Ok(max_relative_error(
            &pde,
            &sphere_oracle(&traj, [0; 3], 0.05, 0.1, &plain)?,
        )?)
    };
    let (coarse, fine) = (sphere_err(128)?, sphere_err(256)?);
    out.push(check(
        coarse / fine >= 3.0,
        format!("sphere 128 -> 256 error ratio {:.2}", coarse / fine),
    ));
    let torus_err = |m: usize| -> Result<f64, Failure> {
        let traj = with_grid("torus.json", m).trajectory()?;
        let y = [m / 4, m / 2, 0];
        let pde = forward_solve(&traj, y, 0.1, 0.2, &plain)?;
        Ok(max_relative_error(
            &pde,
            &theta_oracle(&traj, y, 0.1, 0.2, &plain)?,
        )?)
    };
    let (coarse, fine) = (torus_err(32)?, torus_err(64)?);
    out.push(check(
        coarse / fine >= 3.0,
        format!("torus 32 -> 64 error ratio {:.2}", coarse / fine),
    ));

    // reruns, including a different thread count, must reproduce every byte
    let fx = fixture("torus.json");
    let render = || -> Result<(Vec<u8>, Vec<u8>), Failure> {
        let constants = estimate_ab(&fx.traj, &fx.cfg.sobolev_times(), &fx.cfg.sobolev_options())?;
        let mut a = Vec::new();
        constants.write_csv(&mut a)?;
        let inputs = ComparisonInputs::new(&fx.traj, constants)?;
        let mut b = Vec::new();
        verify(&fx.traj, &inputs, &fx.cfg.samples, &fx.cfg.kernel)?.write_csv(&mut b)?;
        Ok((a, b))
    };
    let first = render()?;
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()?
        .install(render)?;
    out.push(check(
        first == single,
        "torus estimate + verify CSVs byte-identical across reruns",
    ));
    let mut reference = Vec::new();
    fx.constants.write_csv(&mut reference)?;
    out.push(check(reference == first.0, "fixture constants match rerun"));
    Ok(out)
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("flow oracle equivalence", criterion_1),
        ("kernel oracle equivalence", criterion_2),
        ("conservation and semigroup", criterion_3),
        ("maximum-principle suite", criterion_4),
        ("theorem verification on the torus", criterion_5),
        ("corollary verification on the sphere", criterion_6),
        ("Sobolev suite", criterion_7),
        ("numerical hygiene", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let elapsed = clock.elapsed();
        let (pass, lines) = match result {
            Ok(Ok(checks)) => (
                checks.iter().all(|c| c.ok),
                checks
                    .iter()
                    .map(|c| format!("{} {}", if c.ok { "ok  " } else { "FAIL" }, c.what))
                    .collect(),
            ),
            Ok(Err(e)) => (false, vec![format!("FAIL error: {e}")]),
            Err(_) => (false, vec!["FAIL panicked".to_string()]),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name} ({elapsed:.2?})",
            if pass { "PASS" } else { "FAIL" },
            i + 1
        );
        for l in lines {
            println!("      {l}");
        }
    }
    let est: Vec<String> = SHIPPED
        .iter()
        .map(|n| format!("{n} {:.2?}", fixture(n).estimate_time))
        .collect();
    println!("Sobolev estimation times: {}", est.join(", "));
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
