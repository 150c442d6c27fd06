//! Sobolev ingredients along the flow: the sharp Euclidean constant,
//! the ground-state energy of `4 Delta - S`, and probe-based estimates of the
//! constants `A(t)`, `B(t)` in
//! `(int |v|^p)^{2/p} <= A int (|grad v|^2 + S v^2 / 4) + B int v^2`.
//!
//! Probe estimates are lower bounds on admissible constants, not
//! certified constants.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fmt, FlowTrajectory};
use crate::geometry::{
    curvature, grad_sq, unit_sphere_area, GeometryState, ScalarField, Shape, Variant,
};
use crate::heatkernel::solver::{Axis, ZonalAxis};
use crate::quadrature::gauss_legendre_on;

/// Sobolev exponent `2n / (n - 2)`.
pub fn critical_exponent(n: usize) -> f64 {
    2.0 * n as f64 / (n as f64 - 2.0)
}

/// Sharp constant `K(n, 2)` of `||v||_p <= K ||grad v||_2` on `R^n`.
pub fn talenti_constant(n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::BadDimension(n));
    }
    let nf = n as f64;
    let ratio = libm::tgamma(nf) / libm::tgamma(nf / 2.0);
    Ok((1.0 / (PI * nf * (nf - 2.0))).sqrt() * ratio.powf(1.0 / nf))
}

/// Quotient `||v||_p / ||grad v||_2` of the truncated radial profile
/// `v(r) = (eps^2 + r^2)^{-q} - (eps^2 + 1)^{-q}` on the unit ball of `R^n`.
pub fn bubble_quotient(n: usize, eps: f64, q: f64) -> f64 {
    let nf = n as f64;
    let p = critical_exponent(n);
    let cut = (eps * eps + 1.0).powf(-q);
    let mut edges = vec![0.0];
    let mut r = eps;
    while r < 1.0 {
        edges.push(r);
        r *= 2.0;
    }
    edges.push(1.0);
    let (mut num, mut den) = (0.0, 0.0);
    for w in edges.windows(2) {
        let (x, wt) = gauss_legendre_on(16, w[0], w[1]);
        for (r, wt) in x.into_iter().zip(wt) {
            let base = eps * eps + r * r;
            let v = base.powf(-q) - cut;
            let dv = -2.0 * q * r * base.powf(-q - 1.0);
            let jac = wt * r.powf(nf - 1.0);
            num += jac * v.abs().powf(p);
            den += jac * dv * dv;
        }
    }
    let omega = unit_sphere_area(n - 1);
    (omega * num).powf(1.0 / p) / (omega * den).sqrt()
}

fn golden_max(mut a: f64, mut b: f64, iters: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Numerical supremum of [`bubble_quotient`] over concentration
/// `eps in [1e-4, 1]` and exponent `q` within a factor 1.5 of `(n - 2) / 2`.
pub fn bubble_quotient_sup(n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::BadDimension(n));
    }
    let q0 = (n as f64 - 2.0) / 2.0;
    let inner = |log_eps: f64| {
        golden_max(q0 / 1.5, q0 * 1.5, 60, |q| {
            bubble_quotient(n, log_eps.exp(), q)
        })
        .1
    };
    Ok(golden_max(1e-4_f64.ln(), 0.0, 60, inner).1)
}

/// Quadratic form `v -> int (4 |grad v|^2 + S v^2)` restricted to profiles
/// of theta (sphere) or x1 (tori), where the ground state lives.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    /// Dense symmetric `4K + W S`, row-major.
    pub matrix: Vec<f64>,
    /// Diagonal mass `W`.
    pub weights: Vec<f64>,
    pub s: Vec<f64>,
}

impl ReducedForm {
    pub fn new(state: &GeometryState) -> Result<Self> {
        let model = state.model();
        let axis = match model.variant() {
            Variant::RoundSphere => Axis::Zonal(ZonalAxis::new(model.dimension(), model.grid())),
            _ => Axis::periodic(model.grid(), model.config().torus_lengths[0], 0),
        };
        let level = axis.level_from_state(state)?;
        let s = curvature(state)?.s;
        let n = axis.len();
        let mut matrix = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, v) in axis.stiffness(&level, &e).into_iter().enumerate() {
                matrix[i * n + j] = 4.0 * v;
            }
            e[j] = 0.0;
        }
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (matrix[i * n + j] + matrix[j * n + i]);
                matrix[i * n + j] = avg;
                matrix[j * n + i] = avg;
            }
            matrix[i * n + i] += level.weights[i] * s[i];
        }
        Ok(Self {
            matrix,
            weights: level.weights,
            s,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `W^{-1/2} (4K + W S) W^{-1/2}`.
    pub fn normalized(&self) -> Vec<f64> {
        let n = self.len();
        let r: Vec<f64> = self.weights.iter().map(|w| 1.0 / w.sqrt()).collect();
        let mut c = self.matrix.clone();
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] *= r[i] * r[j];
            }
        }
        c
    }

    pub fn rayleigh(&self, v: &[f64]) -> f64 {
        let n = self.len();
        let mut num = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| self.matrix[i * n + j] * v[j]).sum();
            num += v[i] * row;
        }
        let den: f64 = v.iter().zip(&self.weights).map(|(x, w)| w * x * x).sum();
        num / den
    }
}

/// In-place lower Cholesky factor of a dense SPD matrix.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::EigensolveFailed(format!(
                "shifted matrix not positive definite at pivot {j}"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub lambda: f64,
    /// Eigenvector in nodal values, normalized to unit `L^2`.
    pub vector: Vec<f64>,
    /// Rayleigh quotient of `vector` evaluated through the form.
    pub rayleigh: f64,
    pub iterations: usize,
}

const MAX_INVERSE_ITERATIONS: usize = 20_000;

/// Smallest eigenvalue of `4K + WS` relative to `W` by shifted inverse
/// iteration. The shift `min S - 1` keeps the shifted matrix positive
/// definite since the eigenvalues are at least `min S`.
pub fn ground_state(state: &GeometryState) -> Result<GroundState> {
    ReducedForm::new(state)?.ground_state()
}

impl ReducedForm {
    pub fn ground_state(&self) -> Result<GroundState> {
        let form = self;
        let n = form.len();
        let c = form.normalized();
        let shift = form.s.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let mut l = c.clone();
        for i in 0..n {
            l[i * n + i] -= shift;
        }
        cholesky(&mut l, n)?;
        let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        let mut y: Vec<f64> = form.weights.iter().map(|w| w.sqrt()).collect();
        let mut lambda = f64::NAN;
        for it in 1..=MAX_INVERSE_ITERATIONS {
            cholesky_solve(&l, n, &mut y);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            y.iter_mut().for_each(|v| *v /= norm);
            let cy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| c[i * n + j] * y[j]).sum())
                .collect();
            let rq: f64 = y.iter().zip(&cy).map(|(a, b)| a * b).sum();
            let resid = cy
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - rq * b).powi(2))
                .sum::<f64>()
                .sqrt();
            // Rounding in `rq` grows with the largest entry, which blows up near the poles.
            let settled =
                (rq - lambda).abs() <= 1e-14 * rq.abs().max(1.0) + 64.0 * f64::EPSILON * scale;
            lambda = rq;
            if settled && resid <= 1e-9 * scale {
                let vector: Vec<f64> = y
                    .iter()
                    .zip(&form.weights)
                    .map(|(v, w)| v / w.sqrt())
                    .collect();
                let rayleigh = form.rayleigh(&vector);
                if (rayleigh - lambda).abs() > 1e-10 * lambda.abs().max(1.0) {
                    return Err(Error::EigensolveFailed(format!(
                        "Rayleigh quotient {rayleigh} vs eigenvalue {lambda}"
                    )));
                }
                return Ok(GroundState {
                    lambda,
                    vector,
                    rayleigh,
                    iterations: it,
                });
            }
        }
        Err(Error::EigensolveFailed(format!(
            "inverse iteration did not settle in {MAX_INVERSE_ITERATIONS} steps"
        )))
    }
}

/// `lambda_0 = inf_{||v||_2 = 1} int (4 |grad v|^2 + S v^2)`.
pub fn lambda0_alpha(state: &GeometryState) -> Result<f64> {
    Ok(ground_state(state)?.lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Harmonic,
    BandLimited,
    Bump,
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub kind: ProbeKind,
    pub field: ScalarField,
}

pub const HARMONIC_PROBES: usize = 8;
pub const BAND_LIMITED_PROBES: usize = 40;
pub const BUMP_PROBES: usize = 16;

/// Probe grid: zonal on the model grid for the sphere; for tori the model
/// x1 resolution (capped at 64 for the linear torus) times `fiber^2`.
pub fn probe_shape(state: &GeometryState, fiber: usize) -> Shape {
    let model = state.model();
    match model.variant() {
        Variant::RoundSphere => Shape::Zonal(model.grid() + 1),
        Variant::TorusLinear => Shape::Grid([model.grid().min(64), fiber, fiber]),
        Variant::CoupledCircle => Shape::Grid([model.grid(), fiber, fiber]),
    }
}

/// The fixed 64-field probe suite: 8 constants and low harmonics, 40 seeded
/// random band-limited fields and 16 bumps of decreasing resolved width.
pub fn probe_suite(state: &GeometryState, fiber: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = probe_shape(state, fiber);
    let mut out = Vec::with_capacity(HARMONIC_PROBES + BAND_LIMITED_PROBES + BUMP_PROBES);
    match shape {
        Shape::Zonal(nodes) => {
            let h = PI / (nodes - 1) as f64;
            let harmonics: [fn(f64) -> f64; HARMONIC_PROBES] = [
                |_| 1.0,
                |t| t.cos(),
                |t| t.cos().powi(2) - 1.0 / 3.0,
                |t| (2.0 * t).cos(),
                |t| 1.0 + 0.5 * t.cos(),
                |t| 1.0 + 0.3 * (2.0 * t).cos(),
                |t| (3.0 * t).cos(),
                |t| 1.0 - 0.8 * t.cos(),
            ];
            for f in harmonics {
                out.push(Probe {
                    kind: ProbeKind::Harmonic,
                    field: ScalarField::from_fn_zonal(nodes, f),
                });
            }
            for _ in 0..BAND_LIMITED_PROBES {
                let offset = rng.random_range(0.0..2.0);
                let coef: Vec<f64> = (1..=8)
                    .map(|k| rng.random_range(-1.0..1.0) / (1.0 + k as f64))
                    .collect();
                let field = ScalarField::from_fn_zonal(nodes, |t| {
                    offset
                        + coef
                            .iter()
                            .enumerate()
                            .map(|(k, a)| a * ((k + 1) as f64 * t).cos())
                            .sum::<f64>()
                });
                out.push(Probe {
                    kind: ProbeKind::BandLimited,
                    field,
                });
            }
            let (widest, narrowest) = (0.6_f64, 4.0 * h);
            for j in 0..BUMP_PROBES {
                let w = widest * (narrowest / widest).powf(j as f64 / (BUMP_PROBES - 1) as f64);
                let field = ScalarField::from_fn_zonal(nodes, |t| (-t * t / (2.0 * w * w)).exp());
                out.push(Probe {
                    kind: ProbeKind::Bump,
                    field,
                });
            }
        }
        Shape::Grid(n) => {
            let l = state.model().config().torus_lengths;
            let ang = move |x: [f64; 3]| {
                [
                    2.0 * PI * x[0] / l[0],
                    2.0 * PI * x[1] / l[1],
                    2.0 * PI * x[2] / l[2],
                ]
            };
            let harmonics: [fn([f64; 3]) -> f64; HARMONIC_PROBES] = [
                |_| 1.0,
                |u| u[0].cos(),
                |u| u[1].sin(),
                |u| u[2].cos(),
                |u| 1.0 + 0.5 * u[0].cos(),
                |u| (u[0] + u[1]).cos(),
                |u| (u[1] - u[2]).sin(),
                |u| u[0].cos() * u[1].cos() * u[2].cos(),
            ];
            for f in harmonics {
                let field = ScalarField::from_fn_grid(state, n, |x| f(ang(x)));
                out.push(Probe {
                    kind: ProbeKind::Harmonic,
                    field,
                });
            }
            for _ in 0..BAND_LIMITED_PROBES {
                let offset = rng.random_range(0.0..2.0);
                let mut modes = Vec::new();
                for k1 in -2..=2_i32 {
                    for k2 in -2..=2_i32 {
                        for k3 in -2..=2_i32 {
                            if (k1, k2, k3) == (0, 0, 0) {
                                continue;
                            }
                            let amp = rng.random_range(-1.0..1.0)
                                / (1.0 + (k1 * k1 + k2 * k2 + k3 * k3) as f64);
                            let phase = rng.random_range(0.0..2.0 * PI);
                            modes.push(([k1 as f64, k2 as f64, k3 as f64], amp, phase));
                        }
                    }
                }
                let field = ScalarField::from_fn_grid(state, n, |x| {
                    let u = ang(x);
                    offset
                        + modes
                            .iter()
                            .map(|(k, a, ph)| {
                                a * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + ph).cos()
                            })
                            .sum::<f64>()
                });
                out.push(Probe {
                    kind: ProbeKind::BandLimited,
                    field,
                });
            }
            // widths in angle units, narrowest spanning about three fiber cells
            let coarsest = 2.0 * PI / *n.iter().min().expect("three axes") as f64;
            let (widest, narrowest) = (1.0_f64, 1.5 * coarsest);
            for j in 0..BUMP_PROBES {
                let w = widest * (narrowest / widest).powf(j as f64 / (BUMP_PROBES - 1) as f64);
                let centre = [
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                ];
                let field = ScalarField::from_fn_grid(state, n, |x| {
                    let u = ang(x);
                    let e: f64 = (0..3)
                        .map(|i| ((u[i] - centre[i]).cos() - 1.0) / (w * w))
                        .sum();
                    e.exp()
                });
                out.push(Probe {
                    kind: ProbeKind::Bump,
                    field,
                });
            }
        }
    }
    out
}

/// Integrals entering the slack of one probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTerms {
    /// `int |grad v|^2`.
    pub dirichlet: f64,
    /// `int S v^2`.
    pub potential: f64,
    /// `int v^2`.
    pub mass: f64,
    /// `(int |v|^p)^{2/p}`.
    pub lhs: f64,
}

impl ProbeTerms {
    /// Coefficient of `A` in the slack.
    pub fn energy(&self) -> f64 {
        self.dirichlet + 0.25 * self.potential
    }

    pub fn slack(&self, a: f64, b: f64) -> f64 {
        a * self.energy() + b * self.mass - self.lhs
    }
}

pub fn probe_terms(state: &GeometryState, probes: &[Probe]) -> Result<Vec<ProbeTerms>> {
    if probes.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let n = state.model().dimension();
    let p = critical_exponent(n);
    let s = curvature(state)?.s;
    probes
        .par_iter()
        .map(|probe| {
            let f = &probe.field;
            let w = state.weights(f.shape)?;
            let g = grad_sq(state, f)?;
            let s_at = |idx: usize| -> f64 {
                match f.shape {
                    Shape::Grid(dims) if dims[0] == s.len() => s[idx / (dims[1] * dims[2])],
                    // S is constant on the sphere and the linear torus
                    _ => s[0],
                }
            };
            let mut t = ProbeTerms {
                dirichlet: 0.0,
                potential: 0.0,
                mass: 0.0,
                lhs: 0.0,
            };
            for (i, (&v, &wi)) in f.values.iter().zip(&w).enumerate() {
                t.dirichlet += wi * g[i];
                t.potential += wi * s_at(i) * v * v;
                t.mass += wi * v * v;
                t.lhs += wi * v.abs().powf(p);
            }
            t.lhs = t.lhs.powf(2.0 / p);
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSlack {
    pub worst: f64,
    /// First probe attaining the worst slack.
    pub index: usize,
}

fn worst_slack(terms: &[ProbeTerms], a: f64, b: f64) -> ProbeSlack {
    let mut out = ProbeSlack {
        worst: f64::INFINITY,
        index: 0,
    };
    for (i, t) in terms.iter().enumerate() {
        let v = t.slack(a, b);
        if v < out.worst {
            out = ProbeSlack { worst: v, index: i };
        }
    }
    out
}

/// Smallest slack `A int (|grad v|^2 + S v^2/4) + B int v^2 - (int |v|^p)^{2/p}`
/// over the probes.
pub fn probe_inequality(
    state: &GeometryState,
    a: f64,
    b: f64,
    probes: &[Probe],
) -> Result<ProbeSlack> {
    Ok(worst_slack(&probe_terms(state, probes)?, a, b))
}

/// Which power of `K(n,2)` multiplies the gradient term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AConvention {
    #[default]
    Squared,
    Linear,
}

impl AConvention {
    pub fn a_star(self, k: f64) -> f64 {
        match self {
            AConvention::Squared => k * k,
            AConvention::Linear => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SobolevOptions {
    pub a_convention: AConvention,
    pub seed: u64,
    /// Fiber resolution of torus probes.
    pub probe_fiber: usize,
    pub bisection_rtol: f64,
}

impl Default for SobolevOptions {
    fn default() -> Self {
        Self {
            a_convention: AConvention::Squared,
            seed: 42,
            probe_fiber: 32,
            bisection_rtol: 1e-4,
        }
    }
}

const MAX_BRACKET_DOUBLINGS: usize = 200;

/// Smallest `B >= 0` with nonnegative worst slack at fixed `A`, located by
/// bisection to relative width `rtol`; the upper bracket is returned.
pub fn minimal_b(terms: &[ProbeTerms], a: f64, rtol: f64) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let pass = |b: f64| worst_slack(terms, a, b).worst >= 0.0;
    if pass(0.0) {
        return Ok(0.0);
    }
    let mut hi = terms
        .iter()
        .map(|t| t.lhs / t.mass)
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut doublings = 0;
    while !pass(hi) {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
            return Err(Error::BisectionFailed(format!(
                "no admissible B up to {hi}"
            )));
        }
    }
    let mut lo = 0.0;
    while hi - lo > rtol * hi {
        let mid = 0.5 * (lo + hi);
        if pass(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolevConstants {
    /// `K(n, 2)`.
    pub k: f64,
    pub a_convention: AConvention,
    /// `inf S(., 0) > 0`.
    pub positive_case: bool,
    /// False when the curves come from a user override.
    pub estimated: bool,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda0: Vec<f64>,
}

fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= times[0] {
        return values[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return values[last];
    }
    let i = times.partition_point(|&x| x <= t) - 1;
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    values[i] * (1.0 - w) + values[i + 1] * w
}

impl SobolevConstants {
    /// `A(t)` by linear interpolation, clamped outside the sampled range.
    pub fn a_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.a, t)
    }

    pub fn b_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.b, t)
    }

    /// Curves from user-supplied `(t, A, B)` triples; `lambda0` is evaluated
    /// on the trajectory at the override times.
    pub fn from_override(
        traj: &FlowTrajectory,
        convention: AConvention,
        triples: &[(f64, f64, f64)],
    ) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::InvalidConfig("empty Sobolev override".into()));
        }
        if triples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidConfig("override times must increase".into()));
        }
        if triples.iter().any(|&(_, a, b)| !(a > 0.0 && b >= 0.0)) {
            return Err(Error::InvalidConfig(
                "override needs A > 0 and B >= 0".into(),
            ));
        }
        let n = traj.model().dimension();
        let lambda0 = triples
            .iter()
            .map(|&(t, _, _)| lambda0_alpha(&traj.state_at(t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k: talenti_constant(n)?,
            a_convention: convention,
            positive_case: curvature(&traj.initial_state())?.min_s() > 0.0,
            estimated: false,
            times: triples.iter().map(|t| t.0).collect(),
            a: triples.iter().map(|t| t.1).collect(),
            b: triples.iter().map(|t| t.2).collect(),
            lambda0,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "A", "B", "lambda0", "positive_case"])?;
        for i in 0..self.times.len() {
            w.write_record([
                fmt(self.times[i]),
                fmt(self.a[i]),
                fmt(self.b[i]),
                fmt(self.lambda0[i]),
                self.positive_case.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Probe-based `A(t), B(t)` at the requested times. `A` is fixed to the
/// convention's power of `K(n,2)`; in the positive case `B = 0`, otherwise
/// `B(t)` is the smallest value passing every probe.
pub fn estimate_ab(
    traj: &FlowTrajectory,
    times: &[f64],
    opts: &SobolevOptions,
) -> Result<SobolevConstants> {
    if times.is_empty() {
        return Err(Error::InvalidConfig("no estimation times".into()));
    }
    let n = traj.model().dimension();
    let k = talenti_constant(n)?;
    let a_star = opts.a_convention.a_star(k);
    let init = traj.initial_state();
    let positive_case = curvature(&init)?.min_s() > 0.0;
    let probes = probe_suite(&init, opts.probe_fiber, opts.seed);
    let mut out = SobolevConstants {
        k,
        a_convention: opts.a_convention,
        positive_case,
        estimated: true,
        times: times.to_vec(),
        a: Vec::with_capacity(times.len()),
        b: Vec::with_capacity(times.len()),
        lambda0: Vec::with_capacity(times.len()),
    };
    for &t in times {
        let state = traj.state_at(t)?;
        let b = if positive_case {
            0.0
        } else {
            minimal_b(&probe_terms(&state, &probes)?, a_star, opts.bisection_rtol)?
        };
        out.a.push(a_star);
        out.b.push(b);
        out.lambda0.push(lambda0_alpha(&state)?);
    }
    Ok(out)
}
