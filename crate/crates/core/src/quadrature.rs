//! One-dimensional quadrature: adaptive Simpson with its final panel mesh
//! retained (so a result can be re-evaluated at half the panel width),
//! composite Simpson, Gauss-Legendre rules, and the uniform-grid Simpson
//! weights used by the zonal sphere discretization.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;

/// Result of an adaptive Simpson integration.
#[derive(Debug, Clone)]
pub struct AdaptiveQuad {
    pub value: f64,
    /// Final accepted panels, left to right.
    pub panels: Vec<(f64, f64)>,
}

impl AdaptiveQuad {
    /// Re-evaluates the integral on the same mesh with every panel width
    /// halved. The relative difference to `value` is the Richardson halving
    /// check.
    pub fn halved<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.panels
            .iter()
            .map(|&(a, b)| {
                let m = 0.5 * (a + b);
                let coarse = simpson_pair(&f, a, m) + simpson_pair(&f, m, b);
                let fine = simpson_pair(&f, a, 0.5 * (a + m))
                    + simpson_pair(&f, 0.5 * (a + m), m)
                    + simpson_pair(&f, m, 0.5 * (m + b))
                    + simpson_pair(&f, 0.5 * (m + b), b);
                fine + (fine - coarse) / 15.0
            })
            .sum()
    }

    pub fn relative_halving_change<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let h = self.halved(f);
        let scale = self.value.abs().max(f64::MIN_POSITIVE);
        (h - self.value).abs() / scale
    }
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn simpson_pair<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    simpson(fa, f(lm), fm, a, m) + simpson(fm, f(rm), fb, m, b)
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `abs_tol`.
///
/// Returns `QuadratureFailed` when the recursion depth limit is reached
/// before the local error estimate drops below its share of the tolerance,
/// or when the integrand produces a non-finite value.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
) -> Result<AdaptiveQuad> {
    if a == b {
        return Ok(AdaptiveQuad {
            value: 0.0,
            panels: Vec::new(),
        });
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(fa, fm, fb, a, b);
    let mut panels = Vec::new();
    let value = recurse(&f, a, b, fa, fm, fb, whole, abs_tol, 0, &mut panels)?;
    if !value.is_finite() {
        return Err(Error::QuadratureFailed { a, b });
    }
    Ok(AdaptiveQuad { value, panels })
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    panels: &mut Vec<(f64, f64)>,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(Error::QuadratureFailed { a, b });
    }
    if delta.abs() <= 15.0 * tol {
        panels.push((a, b));
        return Ok(left + right + delta / 15.0);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::QuadratureFailed { a, b });
    }
    let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1, panels)?;
    let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1, panels)?;
    Ok(l + r)
}

/// Composite Simpson rule with `panels` panels (each panel uses its midpoint).
pub fn composite_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut sum = f(a) + f(b);
    for i in 1..panels {
        sum += 2.0 * f(a + i as f64 * h);
    }
    for i in 0..panels {
        sum += 4.0 * f(a + (i as f64 + 0.5) * h);
    }
    sum * h / 6.0
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton iteration on the
/// three-term recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j as f64 + 1.0) * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            dp = nf * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss-Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        x.iter().map(|&xi| mid + half * xi).collect(),
        w.iter().map(|&wi| half * wi).collect(),
    )
}

/// Composite Simpson weights for `intervals + 1` uniformly spaced nodes with
/// spacing `h`. `intervals` must be even.
pub fn simpson_weights(intervals: usize, h: f64) -> Vec<f64> {
    assert!(
        intervals >= 2 && intervals.is_multiple_of(2),
        "Simpson needs an even interval count"
    );
    (0..=intervals)
        .map(|i| {
            let c = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}
