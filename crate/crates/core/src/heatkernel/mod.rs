//! Heat kernel `G(x,t;y,s)` of the evolving Laplacian: PDE solves of the
//! heat and conjugate heat equations, closed-form oracles, the semigroup
//! check and the kernel mass diagnostics.
//!
//! Sphere kernels are zonal: nodes are indexed by their angle from a fixed
//! pole, the kernel between nodes `i` and `j` depends only on `|i - j|`, and
//! the stored profile is indexed by that separation. Torus kernels are
//! stored as three one-dimensional factors.

pub mod oracle;
pub mod solver;

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fmt, FlowTrajectory};
use crate::geometry::{unit_sphere_area, Variant};
use crate::quadrature::gauss_legendre_on;
use oracle::{
    sphere_conformal, sphere_diffusion_time, sphere_kernel_at, theta, torus_coefficient,
    torus_diffusion_time,
};
use solver::{evolve, Axis, Stepping, Sweep, ZonalAxis};

/// Node index. Sphere nodes use the first entry only.
pub type Node = [usize; 3];

/// Largest grid written in full by the kernel CSV export.
pub const FULL_EXPORT_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSource {
    /// Oracle for the analytic models, PDE solve otherwise.
    Auto,
    Forward,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelOptions {
    pub min_steps: usize,
    pub max_step: f64,
    /// Oracle initial data is taken at `s + fraction * (t - s)`.
    pub mollify_fraction: f64,
    pub series_tol: f64,
    pub startup_steps: usize,
    pub source: KernelSource,
    /// Extrapolate zonal sphere solves from grids `m` and `2m`.
    pub richardson: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            min_steps: 400,
            max_step: f64::INFINITY,
            mollify_fraction: 0.25,
            series_tol: 1e-14,
            startup_steps: 2,
            source: KernelSource::Auto,
            richardson: true,
        }
    }
}

impl KernelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_steps == 0 || !(self.max_step > 0.0) {
            return Err(Error::InvalidConfig(
                "kernel step controls must be positive".into(),
            ));
        }
        if !(self.mollify_fraction > 0.0 && self.mollify_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mollify_fraction must lie in (0, 1), got {}",
                self.mollify_fraction
            )));
        }
        if !(self.series_tol > 0.0) {
            return Err(Error::InvalidConfig("series_tol must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self, span: f64) -> usize {
        let by_size = if self.max_step.is_finite() {
            (span / self.max_step).ceil() as usize
        } else {
            0
        };
        self.min_steps.max(by_size)
    }

    fn uses_oracle(&self, variant: Variant) -> bool {
        match self.source {
            KernelSource::Auto => variant != Variant::CoupledCircle,
            KernelSource::Oracle => true,
            KernelSource::Forward => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    /// `G(., t; y, s)` as a function of the first point, measured at `t`.
    Forward,
    /// `G(x, t; ., s)` as a function of the second point, measured at `s`.
    Conjugate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolverTag {
    ForwardPde,
    SpectralOracle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelData {
    /// Profile and weights indexed by angular separation from the anchor.
    Zonal { values: Vec<f64>, weights: Vec<f64> },
    /// One factor and one weight vector per coordinate, indexed by node.
    Product {
        factors: [Vec<f64>; 3],
        weights: [Vec<f64>; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    pub direction: Direction,
    pub solver: SolverTag,
    /// Fixed point: `y` for forward fields, `x` for conjugate fields.
    pub anchor: Node,
    pub s: f64,
    pub t: f64,
    pub data: KernelData,
    /// Node spacing per coordinate (angle step for the sphere).
    pub spacing: [f64; 3],
}

impl KernelField {
    pub fn value(&self, node: Node) -> f64 {
        match &self.data {
            KernelData::Zonal { values, .. } => values[node[0].abs_diff(self.anchor[0])],
            KernelData::Product { factors, .. } => (0..3).map(|i| factors[i][node[i]]).product(),
        }
    }

    /// Time at which the free variable's measure is taken.
    pub fn measure_time(&self) -> f64 {
        match self.direction {
            Direction::Forward => self.t,
            Direction::Conjugate => self.s,
        }
    }

    fn weighted_power_sum(&self, p: i32) -> f64 {
        match &self.data {
            KernelData::Zonal { values, weights } => {
                values.iter().zip(weights).map(|(v, w)| w * v.powi(p)).sum()
            }
            KernelData::Product { factors, weights } => (0..3)
                .map(|i| {
                    factors[i]
                        .iter()
                        .zip(&weights[i])
                        .map(|(v, w)| w * v.powi(p))
                        .sum::<f64>()
                })
                .product(),
        }
    }

    /// `int G dmu`.
    pub fn integral(&self) -> f64 {
        self.weighted_power_sum(1)
    }

    /// `int G^2 dmu`.
    pub fn integral_sq(&self) -> f64 {
        self.weighted_power_sum(2)
    }

    /// `int G_self G_other dmu` with this field's weights.
    pub fn pair(&self, other: &KernelField) -> Result<f64> {
        match (&self.data, &other.data) {
            (KernelData::Zonal { values: a, weights }, KernelData::Zonal { values: b, .. }) => {
                if self.anchor[0] != other.anchor[0] || a.len() != b.len() {
                    return Err(Error::UnsupportedVariant(
                        "zonal kernels can only be paired about a common anchor".into(),
                    ));
                }
                Ok(a.iter()
                    .zip(b)
                    .zip(weights)
                    .map(|((x, y), w)| x * y * w)
                    .sum())
            }
            (
                KernelData::Product {
                    factors: a,
                    weights,
                },
                KernelData::Product { factors: b, .. },
            ) => Ok((0..3)
                .map(|i| {
                    a[i].iter()
                        .zip(&b[i])
                        .zip(&weights[i])
                        .map(|((x, y), w)| x * y * w)
                        .sum::<f64>()
                })
                .product()),
            _ => Err(Error::InvalidConfig(
                "kernel fields of different layouts".into(),
            )),
        }
    }

    /// Smallest and largest value over the whole grid.
    pub fn value_range(&self) -> (f64, f64) {
        let span = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
        };
        match &self.data {
            KernelData::Zonal { values, .. } => span(values),
            KernelData::Product { factors, .. } => {
                let r: Vec<(f64, f64)> = factors.iter().map(|f| span(f)).collect();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for mask in 0..8 {
                    let p: f64 = (0..3)
                        .map(|i| if mask >> i & 1 == 0 { r[i].0 } else { r[i].1 })
                        .product();
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                (lo, hi)
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match &self.data {
            KernelData::Zonal { values, .. } => values.len(),
            KernelData::Product { factors, .. } => factors.iter().map(Vec::len).product(),
        }
    }

    /// Writes a `# {json}` metadata line followed by CSV rows. Zonal fields
    /// list the separation angle; product fields list every node when the
    /// grid has at most [`FULL_EXPORT_LIMIT`] nodes and otherwise the three
    /// coordinate lines through the anchor.
    pub fn write_csv<W: Write>(&self, mut out: W, extra: serde_json::Value) -> Result<()> {
        let layout = match &self.data {
            KernelData::Zonal { .. } => "zonal",
            KernelData::Product { .. } if self.node_count() <= FULL_EXPORT_LIMIT => "full",
            KernelData::Product { .. } => "lines",
        };
        let meta = serde_json::json!({
            "direction": self.direction,
            "solver": self.solver,
            "anchor": self.anchor,
            "s": self.s,
            "t": self.t,
            "measure_time": self.measure_time(),
            "layout": layout,
            "extra": extra,
        });
        writeln!(out, "# {meta}")?;
        let mut w = csv::Writer::from_writer(out);
        match &self.data {
            KernelData::Zonal { values, weights } => {
                w.write_record(["separation", "G", "weight"])?;
                for (k, (v, wt)) in values.iter().zip(weights).enumerate() {
                    w.write_record([fmt(k as f64 * self.spacing[0]), fmt(*v), fmt(*wt)])?;
                }
            }
            KernelData::Product { factors, weights } => {
                let row = |node: Node| -> Vec<String> {
                    let mut r: Vec<String> = (0..3)
                        .map(|i| fmt(node[i] as f64 * self.spacing[i]))
                        .collect();
                    r.push(fmt(self.value(node)));
                    r.push(fmt((0..3).map(|i| weights[i][node[i]]).product()));
                    r
                };
                w.write_record(["x1", "x2", "x3", "G", "weight"])?;
                if layout == "full" {
                    for i in 0..factors[0].len() {
                        for j in 0..factors[1].len() {
                            for k in 0..factors[2].len() {
                                w.write_record(row([i, j, k]))?;
                            }
                        }
                    }
                } else {
                    for axis in 0..3 {
                        for j in 0..factors[axis].len() {
                            let mut node = self.anchor;
                            node[axis] = j;
                            w.write_record(row(node))?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `max |a - b| / max |b|` over every grid node.
pub fn max_relative_error(field: &KernelField, reference: &KernelField) -> Result<f64> {
    let mismatch = || Error::InvalidConfig("kernel fields on different grids".into());
    let (diff, scale) = match (&field.data, &reference.data) {
        (KernelData::Zonal { values: a, .. }, KernelData::Zonal { values: b, .. }) => {
            if a.len() != b.len() || field.anchor != reference.anchor {
                return Err(mismatch());
            }
            a.iter().zip(b).fold((0.0_f64, 0.0_f64), |(d, m), (x, y)| {
                (d.max((x - y).abs()), m.max(y.abs()))
            })
        }
        (KernelData::Product { factors: a, .. }, KernelData::Product { factors: b, .. }) => {
            if (0..3).any(|i| a[i].len() != b[i].len()) {
                return Err(mismatch());
            }
            let (mut d, mut m) = (0.0_f64, 0.0_f64);
            for i in 0..a[0].len() {
                for j in 0..a[1].len() {
                    let (pa, pb) = (a[0][i] * a[1][j], b[0][i] * b[1][j]);
                    for k in 0..a[2].len() {
                        let (x, y) = (pa * a[2][k], pb * b[2][k]);
                        d = d.max((x - y).abs());
                        m = m.max(y.abs());
                    }
                }
            }
            (d, m)
        }
        _ => return Err(mismatch()),
    };
    Ok(diff / scale)
}

fn check_times(traj: &FlowTrajectory, s: f64, t: f64) -> Result<()> {
    if !(s < t) {
        return Err(Error::BadTimeOrder { s, t });
    }
    let end = traj.t_end();
    if s < 0.0 || t > end * (1.0 + 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "times [{s}, {t}] must lie in the trajectory range [0, {end}]"
        )));
    }
    Ok(())
}

fn check_node(traj: &FlowTrajectory, node: Node) -> Result<()> {
    let model = traj.model();
    let ok = match model.variant() {
        Variant::RoundSphere => node[0] <= model.grid(),
        _ => node.iter().all(|&i| i < model.grid()),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "node {node:?} is not on the grid"
        )))
    }
}

fn spacing(traj: &FlowTrajectory) -> [f64; 3] {
    let model = traj.model();
    let n = model.grid() as f64;
    match model.variant() {
        Variant::RoundSphere => [PI / n, 0.0, 0.0],
        _ => {
            let l = model.config().torus_lengths;
            [l[0] / n, l[1] / n, l[2] / n]
        }
    }
}

fn separations(traj: &FlowTrajectory) -> Vec<f64> {
    let m = traj.model().grid();
    (0..=m).map(|k| k as f64 * PI / m as f64).collect()
}

/// Oracle kernel in either orientation.
pub fn oracle_kernel(
    traj: &FlowTrajectory,
    anchor: Node,
    s: f64,
    t: f64,
    direction: Direction,
    opts: &KernelOptions,
) -> Result<KernelField> {
    check_times(traj, s, t)?;
    check_node(traj, anchor)?;
    let model = traj.model();
    let mtime = if direction == Direction::Forward {
        t
    } else {
        s
    };
    let data = match model.variant() {
        Variant::RoundSphere => {
            let values = sphere_kernel_at(traj, &separations(traj), s, t, opts.series_tol)?;
            let n = model.dimension() as f64;
            let scale = sphere_conformal(traj, mtime).powf(n / 2.0)
                / traj.initial_state().conformal().powf(n / 2.0);
            let weights = traj
                .initial_state()
                .profile_weights()
                .iter()
                .map(|w| w * scale)
                .collect();
            KernelData::Zonal { values, weights }
        }
        Variant::TorusLinear => {
            let n = model.grid();
            let l = model.config().torus_lengths;
            let mut factors: [Vec<f64>; 3] = Default::default();
            let mut weights: [Vec<f64>; 3] = Default::default();
            for axis in 0..3 {
                factors[axis] = oracle::torus_factor(traj, axis, anchor[axis], n, s, t)?;
                let w = torus_coefficient(traj, axis, mtime).sqrt() * l[axis] / n as f64;
                weights[axis] = vec![w; n];
            }
            KernelData::Product { factors, weights }
        }
        Variant::CoupledCircle => {
            return Err(Error::UnsupportedVariant(
                "no closed-form kernel for COUPLED_CIRCLE".into(),
            ));
        }
    };
    Ok(KernelField {
        direction,
        solver: SolverTag::SpectralOracle,
        anchor,
        s,
        t,
        data,
        spacing: spacing(traj),
    })
}

/// Zonal sphere oracle `G(., t; y, s)`.
pub fn sphere_oracle(
    traj: &FlowTrajectory,
    y: Node,
    s: f64,
    t: f64,
    opts: &KernelOptions,
) -> Result<KernelField> {
    if traj.model().variant() != Variant::RoundSphere {
        return Err(Error::UnsupportedVariant(
            "sphere_oracle needs ROUND_SPHERE".into(),
        ));
    }
    oracle_kernel(traj, y, s, t, Direction::Forward, opts)
}

/// Wrapped-Gaussian torus oracle `G(., t; y, s)`.
pub fn theta_oracle(
    traj: &FlowTrajectory,
    y: Node,
    s: f64,
    t: f64,
    opts: &KernelOptions,
) -> Result<KernelField> {
    if traj.model().variant() != Variant::TorusLinear {
        return Err(Error::UnsupportedVariant(
            "theta_oracle needs TORUS_LINEAR".into(),
        ));
    }
    oracle_kernel(traj, y, s, t, Direction::Forward, opts)
}

fn pde_kernel(
    traj: &FlowTrajectory,
    anchor: Node,
    s: f64,
    t: f64,
    sweep: Sweep,
    opts: &KernelOptions,
) -> Result<KernelField> {
    opts.validate()?;
    check_times(traj, s, t)?;
    check_node(traj, anchor)?;
    let model = traj.model();
    let eps = opts.mollify_fraction * (t - s);
    let direction = if sweep == Sweep::Forward {
        Direction::Forward
    } else {
        Direction::Conjugate
    };
    let data = match model.variant() {
        Variant::RoundSphere => {
            let m = model.grid();
            let (from, to) = if sweep == Sweep::Forward {
                (s + eps, t)
            } else {
                (t - eps, s)
            };
            let ctl = Stepping {
                steps: opts.steps(t - s - eps),
                startup: opts.startup_steps,
                filter_nyquist: false,
            };
            let solve = |cells: usize| -> Result<Vec<f64>> {
                let zonal = ZonalAxis::new(model.dimension(), cells);
                // the initial kernel is symmetric in its two points, so both
                // sweeps start from the same zonal profile
                let (a, b) = if sweep == Sweep::Forward {
                    (s, s + eps)
                } else {
                    (t - eps, t)
                };
                let u0 = zonal
                    .cell_average(|angles| sphere_kernel_at(traj, angles, a, b, opts.series_tol))?;
                evolve(&Axis::Zonal(zonal), traj, sweep, from, to, u0, ctl)
            };
            let coarse = solve(m)?;
            let values = if opts.richardson {
                let fine = solve(2 * m)?;
                coarse
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (4.0 * fine[2 * i] - c) / 3.0)
                    .collect()
            } else {
                coarse
            };
            let axis = Axis::Zonal(ZonalAxis::new(model.dimension(), m));
            let weights = axis.level(traj, to)?.weights;
            KernelData::Zonal { values, weights }
        }
        Variant::TorusLinear | Variant::CoupledCircle => {
            let n = model.grid();
            let l = model.config().torus_lengths;
            let coupled = model.variant() == Variant::CoupledCircle;
            let mut factors: [Vec<f64>; 3] = Default::default();
            let mut weights: [Vec<f64>; 3] = Default::default();
            for i in 0..3 {
                let axis = Axis::periodic(n, l[i], i);
                let Axis::Periodic(p) = &axis else {
                    unreachable!()
                };
                let (from, to, u0) = if coupled {
                    let (from, to) = if sweep == Sweep::Forward {
                        (s, t)
                    } else {
                        (t, s)
                    };
                    let w = axis.level(traj, from)?.weights;
                    let mut rho = vec![0.0; n];
                    rho[anchor[i]] = 1.0;
                    p.diff.remove_nyquist(&mut rho);
                    (from, to, rho.iter().zip(&w).map(|(r, w)| r / w).collect())
                } else if sweep == Sweep::Forward {
                    (
                        s + eps,
                        t,
                        oracle::torus_factor(traj, i, anchor[i], n, s, s + eps)?,
                    )
                } else {
                    (
                        t - eps,
                        s,
                        oracle::torus_factor(traj, i, anchor[i], n, t - eps, t)?,
                    )
                };
                let span = (to - from).abs();
                let ctl = Stepping {
                    steps: opts.steps(span),
                    startup: opts.startup_steps,
                    filter_nyquist: coupled,
                };
                factors[i] = evolve(&axis, traj, sweep, from, to, u0, ctl)?;
                weights[i] = axis.level(traj, to)?.weights;
            }
            KernelData::Product { factors, weights }
        }
    };
    Ok(KernelField {
        direction,
        solver: SolverTag::ForwardPde,
        anchor,
        s,
        t,
        data,
        spacing: spacing(traj),
    })
}

/// Solves the heat equation in `(x, t)` from a mollified delta at `(y, s)`.
pub fn forward_solve(
    traj: &FlowTrajectory,
    y: Node,
    s: f64,
    t: f64,
    opts: &KernelOptions,
) -> Result<KernelField> {
    pde_kernel(traj, y, s, t, Sweep::Forward, opts)
}

/// Solves the conjugate heat equation in `(y, s)` backward from a mollified
/// delta at `(x, t)`.
pub fn conjugate_solve(
    traj: &FlowTrajectory,
    x: Node,
    t: f64,
    s: f64,
    opts: &KernelOptions,
) -> Result<KernelField> {
    pde_kernel(traj, x, s, t, Sweep::Conjugate, opts)
}

/// Kernel field from the source selected in `opts`.
pub fn kernel(
    traj: &FlowTrajectory,
    anchor: Node,
    s: f64,
    t: f64,
    direction: Direction,
    opts: &KernelOptions,
) -> Result<KernelField> {
    if opts.uses_oracle(traj.model().variant()) {
        oracle_kernel(traj, anchor, s, t, direction, opts)
    } else {
        match direction {
            Direction::Forward => forward_solve(traj, anchor, s, t, opts),
            Direction::Conjugate => conjugate_solve(traj, anchor, t, s, opts),
        }
    }
}

/// `G(x, t; y, s)` from the source selected in `opts`.
pub fn kernel_value(
    traj: &FlowTrajectory,
    x: Node,
    t: f64,
    y: Node,
    s: f64,
    opts: &KernelOptions,
) -> Result<f64> {
    check_node(traj, x)?;
    Ok(kernel(traj, y, s, t, Direction::Forward, opts)?.value(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemigroupReport {
    /// `int G(x,t;z,m) G(z,m;y,s) dmu(z,m)`.
    pub composed: f64,
    /// `G(x,t;y,s)`.
    pub direct: f64,
    pub residual: f64,
}

pub fn semigroup_check(
    traj: &FlowTrajectory,
    x: Node,
    t: f64,
    y: Node,
    s: f64,
    m: f64,
    opts: &KernelOptions,
) -> Result<SemigroupReport> {
    if !(s < m && m < t) {
        return Err(Error::BadTimeOrder { s, t });
    }
    check_times(traj, s, t)?;
    check_node(traj, x)?;
    check_node(traj, y)?;
    let model = traj.model();
    let (composed, direct) = if opts.uses_oracle(model.variant()) {
        match model.variant() {
            Variant::RoundSphere => {
                let h = PI / model.grid() as f64;
                let sep = x[0].abs_diff(y[0]) as f64 * h;
                let direct = sphere_kernel_at(traj, &[sep], s, t, opts.series_tol)?[0];
                (
                    sphere_semigroup_quadrature(traj, sep, s, m, t, opts.series_tol)?,
                    direct,
                )
            }
            Variant::TorusLinear => torus_semigroup_quadrature(traj, x, y, s, m, t)?,
            Variant::CoupledCircle => {
                return Err(Error::UnsupportedVariant(
                    "no closed-form kernel for COUPLED_CIRCLE".into(),
                ))
            }
        }
    } else {
        if model.variant() == Variant::RoundSphere && x[0] != y[0] {
            return Err(Error::UnsupportedVariant(
                "zonal PDE semigroup check needs coincident points".into(),
            ));
        }
        let late = conjugate_solve(traj, x, t, m, opts)?;
        let early = forward_solve(traj, y, s, m, opts)?;
        let direct = forward_solve(traj, y, s, t, opts)?.value(x);
        (early.pair(&late)?, direct)
    };
    Ok(SemigroupReport {
        composed,
        direct,
        residual: (composed - direct).abs() / direct,
    })
}

fn panels_for(width: f64, span: f64) -> usize {
    ((span / (0.5 * width)).ceil() as usize).clamp(8, 600)
}

fn sphere_semigroup_quadrature(
    traj: &FlowTrajectory,
    sep: f64,
    s: f64,
    m: f64,
    t: f64,
    tol: f64,
) -> Result<f64> {
    let n = traj.model().dimension();
    let t_early = sphere_diffusion_time(traj, s, m);
    let t_late = sphere_diffusion_time(traj, m, t);
    let width = t_early.min(t_late).sqrt();
    let q = 12;
    let theta_pts = panel_rule(panels_for(width, PI), q, PI);
    let psi_pts = if sep == 0.0 {
        panel_rule(1, q, PI)
    } else {
        panel_rule(panels_for(width / sep.sin().max(width), PI), q, PI)
    };
    let early_vals = sphere_kernel_at(traj, &theta_pts.0, s, m, tol)?;
    let mut cosines = Vec::with_capacity(theta_pts.0.len() * psi_pts.0.len());
    for &th in &theta_pts.0 {
        for &ps in &psi_pts.0 {
            let c = sep.cos() * th.cos() + sep.sin() * th.sin() * ps.cos();
            cosines.push(c.clamp(-1.0, 1.0));
        }
    }
    let pre = sphere_conformal(traj, m).powf(-(n as f64) / 2.0);
    let late_vals = oracle::unit_sphere_kernel(n, &cosines, t_late, tol, pre)?;
    let measure = unit_sphere_area(n - 2) * sphere_conformal(traj, m).powf(n as f64 / 2.0);
    let mut total = 0.0;
    let np = psi_pts.0.len();
    for (i, (&th, &wt)) in theta_pts.0.iter().zip(&theta_pts.1).enumerate() {
        let radial = wt * th.sin().powi(n as i32 - 1) * early_vals[i];
        let mut inner = 0.0;
        for (j, (&ps, &wp)) in psi_pts.0.iter().zip(&psi_pts.1).enumerate() {
            inner += wp * ps.sin().powi(n as i32 - 2) * late_vals[i * np + j];
        }
        total += radial * inner;
    }
    Ok(total * measure)
}

/// Composite Gauss-Legendre rule with `panels` equal panels on `[0, b]`.
fn panel_rule(panels: usize, q: usize, b: f64) -> (Vec<f64>, Vec<f64>) {
    let h = b / panels as f64;
    let mut x = Vec::with_capacity(panels * q);
    let mut w = Vec::with_capacity(panels * q);
    for p in 0..panels {
        let (px, pw) = gauss_legendre_on(q, p as f64 * h, (p + 1) as f64 * h);
        x.extend(px);
        w.extend(pw);
    }
    (x, w)
}

fn torus_semigroup_quadrature(
    traj: &FlowTrajectory,
    x: Node,
    y: Node,
    s: f64,
    m: f64,
    t: f64,
) -> Result<(f64, f64)> {
    let model = traj.model();
    let n = model.grid();
    let l = model.config().torus_lengths;
    let mut composed = 1.0;
    let mut direct = 1.0;
    for axis in 0..3 {
        let h = l[axis] / n as f64;
        let (xa, ya) = (x[axis] as f64 * h, y[axis] as f64 * h);
        let te = torus_diffusion_time(traj, axis, s, m)?;
        let tl = torus_diffusion_time(traj, axis, m, t)?;
        let total = torus_diffusion_time(traj, axis, s, t)?;
        let (gs, gm) = (
            torus_coefficient(traj, axis, s),
            torus_coefficient(traj, axis, m),
        );
        let width = te.min(tl).sqrt();
        let pts = ((l[axis] / (0.05 * width)).ceil() as usize)
            .clamp(1024, 1 << 16)
            .next_power_of_two();
        let dz = l[axis] / pts as f64;
        let sum: f64 = (0..pts)
            .map(|j| {
                let z = j as f64 * dz;
                theta(xa - z, tl, l[axis]) / gm.sqrt() * theta(z - ya, te, l[axis]) / gs.sqrt()
                    * gm.sqrt()
            })
            .sum();
        composed *= sum * dz;
        direct *= theta(xa - ya, total, l[axis]) / gs.sqrt();
    }
    Ok((composed, direct))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassDiagnostics {
    /// `int G(z,t;y,s) dmu(z,t)`.
    pub j_t: f64,
    /// `int G(x,t;z,s) dmu(z,s)`.
    pub jtilde_s: f64,
    /// `int G(z,t;y,s)^2 dmu(z,t)`.
    pub p_t: f64,
    /// `int G(x,t;z,s)^2 dmu(z,s)`.
    pub q_s: f64,
}

pub fn mass_diagnostics(
    traj: &FlowTrajectory,
    x: Node,
    t: f64,
    y: Node,
    s: f64,
    opts: &KernelOptions,
) -> Result<MassDiagnostics> {
    let fwd = kernel(traj, y, s, t, Direction::Forward, opts)?;
    let conj = kernel(traj, x, s, t, Direction::Conjugate, opts)?;
    Ok(MassDiagnostics {
        j_t: fwd.integral(),
        jtilde_s: conj.integral(),
        p_t: fwd.integral_sq(),
        q_s: conj.integral_sq(),
    })
}
