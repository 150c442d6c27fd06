//! Closed-form kernels: the zonal eigen-series on the evolving round sphere
//! and wrapped Gaussians (theta functions) on the linear torus.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flow::FlowTrajectory;
use crate::geometry::{unit_sphere_area, Variant};
use crate::quadrature::adaptive_simpson;

/// Hard cap on the number of eigen-series terms.
pub const MAX_SERIES_TERMS: usize = 100_000;

/// Heat kernel of the unit round `n`-sphere at diffusion time `big_t`,
/// evaluated at points whose geodesic angle from the source has the given
/// cosines. Terms are added until the geometric tail bound, scaled by
/// `prefactor`, drops below `tol`.
pub fn unit_sphere_kernel(
    n: usize,
    cosines: &[f64],
    big_t: f64,
    tol: f64,
    prefactor: f64,
) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::BadDimension(n));
    }
    let nf = n as f64;
    let lambda = (nf - 1.0) / 2.0;
    let vol = unit_sphere_area(n);
    let mut sum = vec![1.0 / vol; cosines.len()];
    let mut p_prev = vec![1.0; cosines.len()];
    let mut p_cur: Vec<f64> = cosines.to_vec();
    // binom(k + n - 2, k) for the current k
    let mut binom = 1.0;
    let bound = |k: usize, binom: f64| -> f64 {
        let kf = k as f64;
        let dim = (2.0 * kf + nf - 1.0) / (nf - 1.0) * binom;
        dim * (-kf * (kf + nf - 1.0) * big_t).exp() / vol
    };
    let mut k = 1usize;
    loop {
        if k > MAX_SERIES_TERMS {
            return Err(Error::SeriesNotConverged(MAX_SERIES_TERMS));
        }
        binom *= (k as f64 + nf - 2.0) / k as f64;
        let term = bound(k, binom);
        for (s, p) in sum.iter_mut().zip(&p_cur) {
            *s += term * p;
        }
        // tail bound: once successive bounds shrink geometrically, the
        // remainder is at most next / (1 - ratio)
        let b1 = binom * (k as f64 + nf - 1.0) / (k as f64 + 1.0);
        let next = bound(k + 1, b1);
        let b2 = b1 * (k as f64 + nf) / (k as f64 + 2.0);
        let after = bound(k + 2, b2);
        if next < term && next > 0.0 {
            let ratio = after / next;
            if ratio < 1.0 && prefactor * next / (1.0 - ratio) < tol {
                break;
            }
        } else if next == 0.0 {
            break;
        }
        // normalized Gegenbauer recurrence P_{k+1} = (2(k+l)x P_k - k P_{k-1}) / (k + 2l)
        let kf = k as f64;
        for ((pp, pc), &x) in p_prev.iter_mut().zip(p_cur.iter_mut()).zip(cosines) {
            let next_p = (2.0 * (kf + lambda) * x * *pc - kf * *pp) / (kf + 2.0 * lambda);
            *pp = *pc;
            *pc = next_p;
        }
        k += 1;
    }
    Ok(sum.into_iter().map(|v| v * prefactor).collect())
}

/// Conformal factor of the sphere at `tau` in the oracle's convention
/// (closed form, or the initial value in frozen mode).
pub fn sphere_conformal(traj: &FlowTrajectory, tau: f64) -> f64 {
    let cfg = traj.model().config();
    let c0 = cfg.initial_dofs()[0];
    if traj.is_frozen() {
        c0
    } else {
        c0 - 2.0 * (cfg.dimension as f64 - 1.0) * tau
    }
}

/// `T(s, t) = int_s^t c(tau)^{-1} dtau` for the sphere.
pub fn sphere_diffusion_time(traj: &FlowTrajectory, s: f64, t: f64) -> f64 {
    let cs = sphere_conformal(traj, s);
    if traj.is_frozen() {
        return (t - s) / cs;
    }
    let k = 2.0 * (traj.model().dimension() as f64 - 1.0);
    -(-k * (t - s) / cs).ln_1p() / k
}

/// Sphere kernel `G(x, t; y, s)` at the given geodesic angles.
pub fn sphere_kernel_at(
    traj: &FlowTrajectory,
    angles: &[f64],
    s: f64,
    t: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    require(traj, Variant::RoundSphere)?;
    let n = traj.model().dimension();
    let big_t = sphere_diffusion_time(traj, s, t);
    let pre = sphere_conformal(traj, s).powf(-(n as f64) / 2.0);
    let cosines: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    unit_sphere_kernel(n, &cosines, big_t, tol, pre)
}

fn require(traj: &FlowTrajectory, v: Variant) -> Result<()> {
    if traj.model().variant() == v {
        Ok(())
    } else {
        Err(Error::UnsupportedVariant(format!(
            "oracle needs {v:?}, trajectory is {:?}",
            traj.model().variant()
        )))
    }
}

/// Periodic heat kernel of `d^2/dz^2` on a circle of length `l` at time
/// `big_t`, normalized to unit mass in `dz`. Uses Gaussian images for
/// `big_t < l^2 / (4 pi)` and the Fourier series otherwise.
pub fn theta(z: f64, big_t: f64, l: f64) -> f64 {
    if big_t < l * l / (4.0 * PI) {
        theta_images(z, big_t, l)
    } else {
        theta_fourier(z, big_t, l)
    }
}

pub fn theta_images(z: f64, big_t: f64, l: f64) -> f64 {
    let z = z - l * (z / l).round();
    let reach = (4.0 * big_t * 45.0).sqrt();
    let m_max = (reach / l).ceil() as i64 + 1;
    let norm = 1.0 / (4.0 * PI * big_t).sqrt();
    (-m_max..=m_max)
        .map(|m| {
            let d = z - m as f64 * l;
            (-d * d / (4.0 * big_t)).exp()
        })
        .sum::<f64>()
        * norm
}

pub fn theta_fourier(z: f64, big_t: f64, l: f64) -> f64 {
    let mut sum = 1.0;
    let mut k = 1u64;
    loop {
        let q = 2.0 * PI * k as f64 / l;
        let decay = (-q * q * big_t).exp();
        if decay < 1e-18 {
            break;
        }
        sum += 2.0 * decay * (q * z).cos();
        k += 1;
    }
    sum / l
}

/// Coefficient of `dx_axis^2` on the linear torus at `tau` (closed form).
pub fn torus_coefficient(traj: &FlowTrajectory, axis: usize, tau: f64) -> f64 {
    let cfg = traj.model().config();
    let g0 = cfg.initial_dofs()[axis];
    if axis != 0 || traj.is_frozen() {
        return g0;
    }
    let k = cfg.kappa();
    g0 + 2.0 * k * k * cfg.coupling.integral(0.0, tau)
}

/// `T_axis(s, t) = int_s^t dtau / g_axis(tau)`.
pub fn torus_diffusion_time(traj: &FlowTrajectory, axis: usize, s: f64, t: f64) -> Result<f64> {
    let cfg = traj.model().config();
    let rate = 2.0 * cfg.kappa().powi(2);
    if axis != 0 || traj.is_frozen() || rate * cfg.coupling.alpha0 == 0.0 {
        return Ok((t - s) / torus_coefficient(traj, axis, s));
    }
    let mut cuts = vec![s];
    cuts.extend(cfg.coupling.breakpoints(s, t));
    cuts.push(t);
    let scale = (t - s) / torus_coefficient(traj, 0, s);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let q = adaptive_simpson(
            |tau| 1.0 / torus_coefficient(traj, 0, tau),
            w[0],
            w[1],
            1e-15 * scale,
        )?;
        total += q.value;
    }
    Ok(total)
}

/// One torus axis factor `Theta(x - y, T) / sqrt(g(s))` at every node of
/// an axis with `n` nodes.
pub fn torus_factor(
    traj: &FlowTrajectory,
    axis: usize,
    y: usize,
    n: usize,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    require(traj, Variant::TorusLinear)?;
    let l = traj.model().config().torus_lengths[axis];
    let big_t = torus_diffusion_time(traj, axis, s, t)?;
    let norm = 1.0 / torus_coefficient(traj, axis, s).sqrt();
    let h = l / n as f64;
    Ok((0..n)
        .map(|j| theta((j as f64 - y as f64) * h, big_t, l) * norm)
        .collect())
}
