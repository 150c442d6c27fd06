//! Crank-Nicolson time stepping of one-dimensional weighted diffusion
//! problems `W(tau) du/dtau = -K(tau) u`.
//!
//! Every model separates into such problems: the torus kernels are products
//! of three one-dimensional factors and the sphere kernel is zonal. `W` is
//! the diagonal matrix of node measure weights and `K` the symmetric
//! positive semidefinite stiffness matrix with `W Delta = -K`. Both depend on
//! time through the trajectory.
//!
//! The forward kernel solves the heat equation directly. The conjugate
//! kernel is advanced backward in time for the density `rho = W u`, which
//! obeys `d rho / dsigma = -K u` in reversed time `sigma`; this absorbs the
//! `-S G` term through the measure evolution and conserves `sum rho`
//! exactly.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::flow::FlowTrajectory;
use crate::geometry::{unit_sphere_area, GeometryState, Model, Variant};
use crate::quadrature::gauss_legendre_on;
use crate::spectral::PeriodicDiff;

const PCG_MAX_ITER: usize = 500;

/// Spatial operator of one axis at one time level.
#[derive(Debug, Clone)]
pub struct Level {
    pub weights: Vec<f64>,
    coef: LevelCoef,
}

#[derive(Debug, Clone)]
enum LevelCoef {
    /// `1 / sqrt(a)` at every node.
    Periodic(Vec<f64>),
    /// Scale of the unit-sphere stiffness, `omega_{n-1} c^{n/2 - 1}`.
    Zonal(f64),
}

/// A one-dimensional axis of the discretization.
#[derive(Debug)]
pub enum Axis {
    Periodic(PeriodicAxis),
    Zonal(ZonalAxis),
}

#[derive(Debug)]
pub struct PeriodicAxis {
    pub diff: PeriodicDiff,
    /// Coordinate index in the model (0 = x1).
    pub index: usize,
    /// Grid spacing; node weights are `sqrt(a) h`.
    h: f64,
}

/// Finite-volume discretization of the zonal sphere Laplacian. Node `i`
/// sits at `theta_i = i pi / m` and owns the cell between the neighbouring
/// half nodes, clipped to `[0, pi]`.
#[derive(Debug)]
pub struct ZonalAxis {
    m: usize,
    n: usize,
    /// `sin^{n-1}(theta_{i+1/2}) / dtheta`, `i = 0..m-1`.
    edge: Vec<f64>,
    /// `int_cell sin^{n-1}`.
    cell: Vec<f64>,
    omega: f64,
}

impl ZonalAxis {
    pub fn new(n: usize, m: usize) -> Self {
        let h = PI / m as f64;
        let p = n as i32 - 1;
        let edge = (0..m)
            .map(|i| ((i as f64 + 0.5) * h).sin().powi(p) / h)
            .collect();
        let (gx, gw) = crate::quadrature::gauss_legendre(12);
        let cell = (0..=m)
            .map(|i| {
                let a = ((i as f64 - 0.5) * h).max(0.0);
                let b = ((i as f64 + 0.5) * h).min(PI);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                gx.iter()
                    .zip(&gw)
                    .map(|(x, w)| w * half * (mid + half * x).sin().powi(p))
                    .sum()
            })
            .collect();
        Self {
            m,
            n,
            edge,
            cell,
            omega: unit_sphere_area(n - 1),
        }
    }

    pub fn nodes(&self) -> usize {
        self.m + 1
    }

    /// Cell edges `[a_i, b_i]`.
    pub fn cell_bounds(&self, i: usize) -> (f64, f64) {
        let h = PI / self.m as f64;
        (
            ((i as f64 - 0.5) * h).max(0.0),
            ((i as f64 + 0.5) * h).min(PI),
        )
    }

    /// Cell averages (weighted by `sin^{n-1}`) of a profile given as a
    /// function of the angle.
    pub fn cell_average(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let q = 8;
        let mut pts = Vec::with_capacity(q * self.nodes());
        let mut wts = Vec::with_capacity(q * self.nodes());
        for i in 0..self.nodes() {
            let (a, b) = self.cell_bounds(i);
            let (x, w) = gauss_legendre_on(q, a, b);
            for (xi, wi) in x.into_iter().zip(w) {
                wts.push(wi * xi.sin().powi(self.n as i32 - 1));
                pts.push(xi);
            }
        }
        let vals = f(&pts)?;
        Ok((0..self.nodes())
            .map(|i| {
                let r = i * q..(i + 1) * q;
                let num: f64 = vals[r.clone()]
                    .iter()
                    .zip(&wts[r.clone()])
                    .map(|(v, w)| v * w)
                    .sum();
                num / wts[r].iter().sum::<f64>()
            })
            .collect())
    }
}

impl Axis {
    pub fn periodic(n: usize, length: f64, index: usize) -> Self {
        Axis::Periodic(PeriodicAxis {
            diff: PeriodicDiff::new(n, length),
            index,
            h: length / n as f64,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Periodic(p) => p.diff.len(),
            Axis::Zonal(z) => z.nodes(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operator data at time `tau` read from the trajectory.
    pub fn level(&self, traj: &FlowTrajectory, tau: f64) -> Result<Level> {
        self.level_from_dofs(traj.model(), &traj.dofs_at(tau)?, tau)
    }

    /// Operator data of a single geometry state.
    pub fn level_from_state(&self, state: &GeometryState) -> Result<Level> {
        self.level_from_dofs(state.model(), state.dofs(), state.time)
    }

    fn level_from_dofs(&self, model: &Model, dofs: &[f64], tau: f64) -> Result<Level> {
        match self {
            Axis::Zonal(z) => {
                let c = dofs[0];
                if !(c > 0.0) {
                    return Err(Error::DegenerateMetric {
                        time: tau,
                        detail: format!("conformal factor {c}"),
                    });
                }
                let nf = z.n as f64;
                let wscale = z.omega * c.powf(nf / 2.0);
                Ok(Level {
                    weights: z.cell.iter().map(|v| v * wscale).collect(),
                    coef: LevelCoef::Zonal(z.omega * c.powf(nf / 2.0 - 1.0)),
                })
            }
            Axis::Periodic(p) => {
                let n = p.diff.len();
                let a: Vec<f64> = match (model.variant(), p.index) {
                    (Variant::TorusLinear, i) => vec![dofs[i]; n],
                    (Variant::CoupledCircle, 0) => dofs[..model.grid()].to_vec(),
                    (Variant::CoupledCircle, 1) => vec![model.fibers().0; n],
                    (Variant::CoupledCircle, _) => vec![model.fibers().1; n],
                    (Variant::RoundSphere, _) => unreachable!("periodic axis on a sphere"),
                };
                if let Some(bad) = a.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::DegenerateMetric {
                        time: tau,
                        detail: format!("metric coefficient {bad}"),
                    });
                }
                Ok(Level {
                    weights: a.iter().map(|v| v.sqrt() * p.h).collect(),
                    coef: LevelCoef::Periodic(a.iter().map(|v| 1.0 / v.sqrt()).collect()),
                })
            }
        }
    }

    /// `K u`.
    pub fn stiffness(&self, level: &Level, u: &[f64]) -> Vec<f64> {
        match (self, &level.coef) {
            (Axis::Periodic(p), LevelCoef::Periodic(s)) => {
                let mut g = p.diff.d1(u);
                for (gi, si) in g.iter_mut().zip(s) {
                    *gi *= si;
                }
                p.diff.d1(&g).into_iter().map(|v| -p.h * v).collect()
            }
            (Axis::Zonal(z), LevelCoef::Zonal(scale)) => {
                let mut out = vec![0.0; u.len()];
                for (i, e) in z.edge.iter().enumerate() {
                    let flux = e * (u[i + 1] - u[i]);
                    out[i] -= flux;
                    out[i + 1] += flux;
                }
                out.iter_mut().for_each(|v| *v *= scale);
                out
            }
            _ => unreachable!("level built for a different axis"),
        }
    }

    /// Solves `(diag(d) + beta K) u = rhs`.
    pub fn solve_shifted(
        &self,
        level: &Level,
        d: &[f64],
        beta: f64,
        rhs: &[f64],
    ) -> Result<Vec<f64>> {
        match (self, &level.coef) {
            (Axis::Zonal(z), LevelCoef::Zonal(scale)) => {
                Ok(thomas_shifted(z, d, beta * scale, rhs))
            }
            (Axis::Periodic(p), LevelCoef::Periodic(s)) => {
                pcg_shifted(self, p, level, s, d, beta, rhs)
            }
            _ => unreachable!("level built for a different axis"),
        }
    }
}

fn thomas_shifted(z: &ZonalAxis, d: &[f64], bk: f64, rhs: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut diag = d.to_vec();
    let mut off = vec![0.0; n - 1];
    for (i, e) in z.edge.iter().enumerate() {
        diag[i] += bk * e;
        diag[i + 1] += bk * e;
        off[i] = -bk * e;
    }
    // symmetric tridiagonal elimination
    let mut c = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = if n > 1 { off[0] / denom } else { 0.0 };
    x[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - off[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = off[i] / denom;
        }
        x[i] = (rhs[i] - off[i - 1] * x[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// Preconditioned conjugate gradients with a Fourier-diagonal
/// preconditioner built from mean coefficients. For uniform coefficients the
/// preconditioner is the exact inverse.
fn pcg_shifted(
    axis: &Axis,
    p: &PeriodicAxis,
    level: &Level,
    s: &[f64],
    d: &[f64],
    beta: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = d.len();
    let d_mean = d.iter().sum::<f64>() / n as f64;
    let s_mean = s.iter().sum::<f64>() / n as f64;
    let symbol: Vec<f64> = (0..n)
        .map(|j| {
            let q = p.diff.d1_symbol(j);
            d_mean + beta * p.h * q * q * s_mean
        })
        .collect();
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut spec = p.diff.to_spectrum(r);
        for (c, m) in spec.iter_mut().zip(&symbol) {
            *c /= Complex64::new(*m, 0.0);
        }
        p.diff.from_spectrum(spec)
    };
    let apply = |u: &[f64]| -> Vec<f64> {
        let k = axis.stiffness(level, u);
        (0..n).map(|i| d[i] * u[i] + beta * k[i]).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let rhs_norm = dot(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = precond(rhs);
    let ax = apply(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z = precond(&r);
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    let tol = 1e-14 * rhs_norm;
    for _ in 0..PCG_MAX_ITER {
        if dot(&r, &r).sqrt() <= tol {
            return Ok(x);
        }
        let ad = apply(&dir);
        let step = rz / dot(&dir, &ad);
        for i in 0..n {
            x[i] += step * dir[i];
            r[i] -= step * ad[i];
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let gamma = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            dir[i] = z[i] + gamma * dir[i];
        }
    }
    if dot(&r, &r).sqrt() <= 1e-10 * rhs_norm {
        return Ok(x);
    }
    Err(Error::SolveFailed(format!(
        "PCG did not converge in {PCG_MAX_ITER} iterations"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Heat equation from an early to a late time.
    Forward,
    /// Conjugate equation from a late to an early time.
    Conjugate,
}

/// Time-stepping controls.
#[derive(Debug, Clone, Copy)]
pub struct Stepping {
    pub steps: usize,
    /// Leading Crank-Nicolson steps replaced by two backward-Euler half steps.
    pub startup: usize,
    pub filter_nyquist: bool,
}

/// Advances `u0` (nodal kernel values) from `from` to `to`. For the
/// conjugate sweep `from > to`.
pub fn evolve(
    axis: &Axis,
    traj: &FlowTrajectory,
    sweep: Sweep,
    from: f64,
    to: f64,
    u0: Vec<f64>,
    ctl: Stepping,
) -> Result<Vec<f64>> {
    let steps = ctl.steps.max(1);
    let dtau = (to - from).abs() / steps as f64;
    let dir = if to >= from { 1.0 } else { -1.0 };
    let time = |k: f64| from + dir * k * dtau;
    let mut u = u0;
    let mut lvl0 = axis.level(traj, from)?;
    let filter = |u: &mut Vec<f64>| {
        if let (true, Axis::Periodic(p)) = (ctl.filter_nyquist, axis) {
            p.diff.remove_nyquist(u);
        }
    };
    for k in 0..steps {
        let lvl1 = axis.level(
            traj,
            if k + 1 == steps {
                to
            } else {
                time(k as f64 + 1.0)
            },
        )?;
        if k < ctl.startup {
            let mid = axis.level(traj, time(k as f64 + 0.5))?;
            let half = 0.5 * dtau;
            u = backward_euler(axis, sweep, &lvl0, &mid, half, &u)?;
            u = backward_euler(axis, sweep, &mid, &lvl1, half, &u)?;
        } else {
            let beta = 0.5 * dtau;
            let ku = axis.stiffness(&lvl0, &u);
            let rhs: Vec<f64> = match sweep {
                Sweep::Forward => (0..u.len())
                    .map(|i| lvl1.weights[i] * (u[i] - beta * ku[i] / lvl0.weights[i]))
                    .collect(),
                Sweep::Conjugate => (0..u.len())
                    .map(|i| lvl0.weights[i] * u[i] - beta * ku[i])
                    .collect(),
            };
            u = axis.solve_shifted(&lvl1, &lvl1.weights, beta, &rhs)?;
        }
        if sweep == Sweep::Forward {
            filter(&mut u);
        }
        lvl0 = lvl1;
    }
    Ok(u)
}

fn backward_euler(
    axis: &Axis,
    sweep: Sweep,
    prev: &Level,
    next: &Level,
    dt: f64,
    u: &[f64],
) -> Result<Vec<f64>> {
    let rhs: Vec<f64> = match sweep {
        Sweep::Forward => next.weights.iter().zip(u).map(|(w, v)| w * v).collect(),
        Sweep::Conjugate => prev.weights.iter().zip(u).map(|(w, v)| w * v).collect(),
    };
    axis.solve_shifted(next, &next.weights, dt, &rhs)
}
