//! Model geometries, their discretizations, measures, Laplacians and the
//! curvature/map quantities that drive the flow and the bounds.
//!
//! Sphere fields are zonal profiles on a uniform grid `theta_i = i*pi/m`
//! (angle from a fixed pole). Torus fields live on a uniform periodic grid in
//! all three coordinates; metric and map data depend on `x1` only, so
//! curvature quantities are stored as profiles along `x1`.

use std::f64::consts::PI;
use std::sync::Arc;

use libm::tgamma as gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::simpson_weights;
use crate::spectral::{PeriodicDiff, ZonalDiff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    RoundSphere,
    TorusLinear,
    CoupledCircle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleForm {
    Constant,
    LinearFloor,
    Exponential,
}

/// Coupling function alpha(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingSchedule {
    pub form: ScheduleForm,
    pub alpha0: f64,
    pub rate: f64,
    pub floor: f64,
}

impl CouplingSchedule {
    pub fn constant(alpha0: f64) -> Self {
        Self {
            form: ScheduleForm::Constant,
            alpha0,
            rate: 0.0,
            floor: alpha0,
        }
    }

    pub fn linear_floor(alpha0: f64, rate: f64, floor: f64) -> Self {
        Self {
            form: ScheduleForm::LinearFloor,
            alpha0,
            rate,
            floor,
        }
    }

    pub fn exponential(alpha0: f64, rate: f64, floor: f64) -> Self {
        Self {
            form: ScheduleForm::Exponential,
            alpha0,
            rate,
            floor,
        }
    }

    /// Checks positivity and monotonicity. `alpha0 = 0` is accepted as the
    /// uncoupled test mode.
    pub fn validate(&self) -> Result<()> {
        let finite = self.alpha0.is_finite() && self.rate.is_finite() && self.floor.is_finite();
        if !finite || self.alpha0 < 0.0 {
            return Err(Error::HypothesisViolated(format!(
                "coupling alpha must be a positive function, got alpha0 = {}",
                self.alpha0
            )));
        }
        if self.form == ScheduleForm::Constant {
            return Ok(());
        }
        if self.rate < 0.0 {
            return Err(Error::HypothesisViolated(format!(
                "coupling alpha(t) must be non-increasing, got rate = {} < 0",
                self.rate
            )));
        }
        if self.floor > self.alpha0 {
            return Err(Error::HypothesisViolated(format!(
                "coupling alpha(t) must be non-increasing, got floor = {} above alpha0 = {}",
                self.floor, self.alpha0
            )));
        }
        if self.floor <= 0.0 && self.alpha0 > 0.0 {
            return Err(Error::HypothesisViolated(format!(
                "coupling alpha(t) must stay positive, got floor = {}",
                self.floor
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.form {
            ScheduleForm::Constant => self.alpha0,
            ScheduleForm::LinearFloor => (self.alpha0 - self.rate * t).max(self.floor),
            ScheduleForm::Exponential => {
                self.floor + (self.alpha0 - self.floor) * (-self.rate * t).exp()
            }
        }
    }

    /// Time at which LINEAR_FLOOR reaches its floor.
    fn kink(&self) -> Option<f64> {
        (self.form == ScheduleForm::LinearFloor && self.rate > 0.0)
            .then(|| (self.alpha0 - self.floor) / self.rate)
    }

    fn antiderivative(&self, t: f64) -> f64 {
        match self.form {
            ScheduleForm::Constant => self.alpha0 * t,
            ScheduleForm::LinearFloor => match self.kink() {
                None => self.alpha0 * t,
                Some(k) if t <= k => self.alpha0 * t - 0.5 * self.rate * t * t,
                Some(k) => self.alpha0 * k - 0.5 * self.rate * k * k + self.floor * (t - k),
            },
            ScheduleForm::Exponential => {
                if self.rate == 0.0 {
                    self.alpha0 * t
                } else {
                    self.floor * t
                        + (self.alpha0 - self.floor) * (-(-self.rate * t).exp_m1()) / self.rate
                }
            }
        }
    }

    /// Exact integral of alpha over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.antiderivative(b) - self.antiderivative(a)
    }

    /// Points in the open interval `(a, b)` where alpha is not smooth.
    pub fn breakpoints(&self, a: f64, b: f64) -> Vec<f64> {
        self.kink()
            .filter(|&k| k > a && k < b)
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetricData {
    /// Conformal factor r^2 of the round metric.
    Conformal(f64),
    Diagonal([f64; 3]),
    /// `A(x1)` samples and constant fiber coefficients.
    Profile {
        a: Vec<f64>,
        b: f64,
        c: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MapData {
    Constant,
    Winding(i64),
    Perturbed { winding: i64, psi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub variant: Variant,
    pub dimension: usize,
    pub sphere_radius0: f64,
    pub torus_lengths: [f64; 3],
    pub metric0: MetricData,
    pub map0: MapData,
    pub grid: usize,
    pub coupling: CouplingSchedule,
}

impl ManifoldConfig {
    pub fn round_sphere(
        dimension: usize,
        radius0: f64,
        n_theta: usize,
        coupling: CouplingSchedule,
    ) -> Self {
        Self {
            variant: Variant::RoundSphere,
            dimension,
            sphere_radius0: radius0,
            torus_lengths: [0.0; 3],
            metric0: MetricData::Conformal(radius0 * radius0),
            map0: MapData::Constant,
            grid: n_theta,
            coupling,
        }
    }

    pub fn torus_linear(
        lengths: [f64; 3],
        metric: [f64; 3],
        winding: i64,
        grid: usize,
        coupling: CouplingSchedule,
    ) -> Self {
        Self {
            variant: Variant::TorusLinear,
            dimension: 3,
            sphere_radius0: 0.0,
            torus_lengths: lengths,
            metric0: MetricData::Diagonal(metric),
            map0: MapData::Winding(winding),
            grid,
            coupling,
        }
    }

    pub fn coupled_circle(
        lengths: [f64; 3],
        a: Vec<f64>,
        fibers: (f64, f64),
        winding: i64,
        psi: Vec<f64>,
        coupling: CouplingSchedule,
    ) -> Self {
        Self {
            variant: Variant::CoupledCircle,
            dimension: 3,
            sphere_radius0: 0.0,
            torus_lengths: lengths,
            grid: a.len(),
            metric0: MetricData::Profile {
                a,
                b: fibers.0,
                c: fibers.1,
            },
            map0: MapData::Perturbed { winding, psi },
            coupling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 3 {
            return Err(Error::BadDimension(self.dimension));
        }
        self.coupling.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonPositiveMetric(format!("{name} = {v}")))
            }
        };
        match (self.variant, &self.metric0, &self.map0) {
            (Variant::RoundSphere, MetricData::Conformal(r2), MapData::Constant) => {
                positive("sphere_radius0", self.sphere_radius0)?;
                positive("r0^2", *r2)?;
                if self.grid < 4 || !self.grid.is_multiple_of(2) {
                    return Err(Error::InvalidConfig(format!(
                        "sphere grid must be an even count >= 4, got {}",
                        self.grid
                    )));
                }
            }
            (Variant::TorusLinear, MetricData::Diagonal(g), MapData::Winding(_)) => {
                self.check_torus_common()?;
                for (i, &v) in g.iter().enumerate() {
                    positive(&format!("metric0[{i}]"), v)?;
                }
            }
            (
                Variant::CoupledCircle,
                MetricData::Profile { a, b, c },
                MapData::Perturbed { psi, .. },
            ) => {
                self.check_torus_common()?;
                if a.len() != self.grid || psi.len() != self.grid {
                    return Err(Error::InvalidConfig(format!(
                        "metric and map samples must both have {} entries, got {} and {}",
                        self.grid,
                        a.len(),
                        psi.len()
                    )));
                }
                for (i, &v) in a.iter().enumerate() {
                    positive(&format!("A0[{i}]"), v)?;
                }
                positive("B", *b)?;
                positive("C", *c)?;
                if psi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "map perturbation contains non-finite samples".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "metric/map data do not match variant {:?}",
                    self.variant
                )))
            }
        }
        Ok(())
    }

    fn check_torus_common(&self) -> Result<()> {
        if self.dimension != 3 {
            return Err(Error::UnsupportedVariant(format!(
                "torus models are three-dimensional, got n = {}",
                self.dimension
            )));
        }
        for (i, &l) in self.torus_lengths.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "torus_lengths[{i}] = {l} must be positive"
                )));
            }
        }
        if self.grid < 8 || !self.grid.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "torus grid must be an even count >= 8, got {}",
                self.grid
            )));
        }
        Ok(())
    }

    pub fn winding(&self) -> i64 {
        match self.map0 {
            MapData::Constant => 0,
            MapData::Winding(d) | MapData::Perturbed { winding: d, .. } => d,
        }
    }

    /// Slope of the linear part of the map, `2 pi d / L1`.
    pub fn kappa(&self) -> f64 {
        match self.variant {
            Variant::RoundSphere => 0.0,
            _ => 2.0 * PI * self.winding() as f64 / self.torus_lengths[0],
        }
    }

    /// Initial degrees of freedom in the flat layout used by the flow.
    pub fn initial_dofs(&self) -> Vec<f64> {
        match (&self.metric0, &self.map0) {
            (MetricData::Conformal(r2), _) => vec![*r2],
            (MetricData::Diagonal(g), _) => g.to_vec(),
            (MetricData::Profile { a, .. }, MapData::Perturbed { psi, .. }) => {
                let mut y = a.clone();
                y.extend_from_slice(psi);
                y
            }
            (MetricData::Profile { a, .. }, _) => {
                let mut y = a.clone();
                y.extend(std::iter::repeat_n(0.0, a.len()));
                y
            }
        }
    }

    /// Sphere degeneracy time `r0^2 / (2(n-1))`.
    pub fn degeneracy_time(&self) -> Option<f64> {
        match &self.metric0 {
            MetricData::Conformal(r2) => Some(r2 / (2.0 * (self.dimension as f64 - 1.0))),
            _ => None,
        }
    }
}

/// Area of the unit `k`-sphere.
pub fn unit_sphere_area(k: usize) -> f64 {
    let h = (k as f64 + 1.0) / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// Sampling layout of a scalar field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Zonal profile with `nodes` samples on `[0, pi]`.
    Zonal(usize),
    /// Periodic grid, row-major with the last index fastest.
    Grid([usize; 3]),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Zonal(n) => n,
            Shape::Grid([a, b, c]) => a * b * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(shape: Shape, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            values.len(),
            "field length does not match its shape"
        );
        Self { shape, values }
    }

    pub fn constant(shape: Shape, v: f64) -> Self {
        Self {
            shape,
            values: vec![v; shape.len()],
        }
    }

    pub fn from_fn_grid(state: &GeometryState, n: [usize; 3], f: impl Fn([f64; 3]) -> f64) -> Self {
        let l = state.model().config().torus_lengths;
        let mut values = Vec::with_capacity(n[0] * n[1] * n[2]);
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    values.push(f([
                        i as f64 * l[0] / n[0] as f64,
                        j as f64 * l[1] / n[1] as f64,
                        k as f64 * l[2] / n[2] as f64,
                    ]));
                }
            }
        }
        Self {
            shape: Shape::Grid(n),
            values,
        }
    }

    pub fn from_fn_zonal(nodes: usize, f: impl Fn(f64) -> f64) -> Self {
        let m = nodes - 1;
        let values = (0..nodes).map(|i| f(i as f64 * PI / m as f64)).collect();
        Self {
            shape: Shape::Zonal(nodes),
            values,
        }
    }
}

/// Validated configuration plus the operators shared by every state.
#[derive(Debug)]
pub struct Model {
    cfg: ManifoldConfig,
    x1: Option<PeriodicDiff>,
    zonal: Option<ZonalDiff>,
    /// Unit-sphere zonal weights `omega_{n-1} sin^{n-1}(theta) * simpson`.
    unit_zonal_weights: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ManifoldConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let (x1, zonal, unit_zonal_weights) = match cfg.variant {
            Variant::RoundSphere => {
                let w = unit_zonal_weights(cfg.dimension, cfg.grid);
                (None, Some(ZonalDiff::new(cfg.grid)), w)
            }
            _ => (
                Some(PeriodicDiff::new(cfg.grid, cfg.torus_lengths[0])),
                None,
                Vec::new(),
            ),
        };
        Ok(Arc::new(Self {
            cfg,
            x1,
            zonal,
            unit_zonal_weights,
        }))
    }

    pub fn config(&self) -> &ManifoldConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    pub fn grid(&self) -> usize {
        self.cfg.grid
    }

    pub fn x1_diff(&self) -> Option<&PeriodicDiff> {
        self.x1.as_ref()
    }

    pub fn zonal_diff(&self) -> Option<&ZonalDiff> {
        self.zonal.as_ref()
    }

    /// Node coordinates along the varying direction (theta or x1).
    pub fn nodes(&self) -> Vec<f64> {
        match self.cfg.variant {
            Variant::RoundSphere => (0..=self.cfg.grid)
                .map(|i| i as f64 * PI / self.cfg.grid as f64)
                .collect(),
            _ => {
                let h = self.cfg.torus_lengths[0] / self.cfg.grid as f64;
                (0..self.cfg.grid).map(|i| i as f64 * h).collect()
            }
        }
    }

    /// Layout of a full field on the model grid.
    pub fn shape(&self) -> Shape {
        match self.cfg.variant {
            Variant::RoundSphere => Shape::Zonal(self.cfg.grid + 1),
            _ => Shape::Grid([self.cfg.grid; 3]),
        }
    }

    pub fn initial_state(self: &Arc<Self>) -> Result<GeometryState> {
        GeometryState::new(self.clone(), 0.0, self.cfg.initial_dofs())
    }

    /// Number of flat degrees of freedom.
    pub fn dof_len(&self) -> usize {
        match self.cfg.variant {
            Variant::RoundSphere => 1,
            Variant::TorusLinear => 3,
            Variant::CoupledCircle => 2 * self.cfg.grid,
        }
    }

    /// Indices of the metric (as opposed to map) degrees of freedom.
    pub fn metric_dof_range(&self) -> std::ops::Range<usize> {
        match self.cfg.variant {
            Variant::RoundSphere => 0..1,
            Variant::TorusLinear => 0..3,
            Variant::CoupledCircle => 0..self.cfg.grid,
        }
    }

    /// Fiber coefficients `(B, C)` of the coupled model.
    pub fn fibers(&self) -> (f64, f64) {
        match self.cfg.metric0 {
            MetricData::Profile { b, c, .. } => (b, c),
            _ => (1.0, 1.0),
        }
    }
}

fn unit_zonal_weights(n: usize, m: usize) -> Vec<f64> {
    let h = PI / m as f64;
    let omega = unit_sphere_area(n - 1);
    simpson_weights(m, h)
        .into_iter()
        .enumerate()
        .map(|(i, w)| omega * w * (i as f64 * h).sin().powi(n as i32 - 1))
        .collect()
}

/// Metric and map degrees of freedom at one time.
#[derive(Debug, Clone)]
pub struct GeometryState {
    model: Arc<Model>,
    pub time: f64,
    dofs: Vec<f64>,
    /// Measure weights of x1-only (tori) or zonal (sphere) profiles on the
    /// model grid.
    weights: Vec<f64>,
}

impl GeometryState {
    pub fn new(model: Arc<Model>, time: f64, dofs: Vec<f64>) -> Result<Self> {
        if dofs.len() != model.dof_len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} degrees of freedom, got {}",
                model.dof_len(),
                dofs.len()
            )));
        }
        for (i, &v) in dofs[model.metric_dof_range()].iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveMetric(format!(
                    "metric dof {i} = {v} at t = {time}"
                )));
            }
        }
        let mut state = Self {
            model,
            time,
            dofs,
            weights: Vec::new(),
        };
        state.weights = state.compute_profile_weights();
        Ok(state)
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn dofs(&self) -> &[f64] {
        &self.dofs
    }

    /// Conformal factor `c = r^2` (sphere).
    pub fn conformal(&self) -> f64 {
        self.dofs[0]
    }

    /// Diagonal metric coefficient profiles `(g11(x1), g22, g33)` (tori).
    pub fn torus_metric(&self) -> (Vec<f64>, f64, f64) {
        match self.model.variant() {
            Variant::TorusLinear => (
                vec![self.dofs[0]; self.model.grid()],
                self.dofs[1],
                self.dofs[2],
            ),
            Variant::CoupledCircle => {
                let (b, c) = self.model.fibers();
                (self.dofs[..self.model.grid()].to_vec(), b, c)
            }
            Variant::RoundSphere => panic!("torus_metric called on a sphere state"),
        }
    }

    /// Coefficient of `dx_axis^2` at x1-node `i`.
    pub fn axis_coefficient(&self, axis: usize, i: usize) -> f64 {
        match (self.model.variant(), axis) {
            (Variant::TorusLinear, a) => self.dofs[a],
            (Variant::CoupledCircle, 0) => self.dofs[i],
            (Variant::CoupledCircle, 1) => self.model.fibers().0,
            (Variant::CoupledCircle, _) => self.model.fibers().1,
            (Variant::RoundSphere, _) => panic!("axis_coefficient called on a sphere state"),
        }
    }

    /// Map perturbation samples (coupled model).
    pub fn psi(&self) -> &[f64] {
        &self.dofs[self.model.grid()..]
    }

    pub fn alpha(&self) -> f64 {
        self.model.cfg.coupling.alpha(self.time)
    }

    fn compute_profile_weights(&self) -> Vec<f64> {
        let cfg = &self.model.cfg;
        match cfg.variant {
            Variant::RoundSphere => {
                let scale = self.conformal().powf(cfg.dimension as f64 / 2.0);
                self.model
                    .unit_zonal_weights
                    .iter()
                    .map(|w| w * scale)
                    .collect()
            }
            _ => {
                let l = cfg.torus_lengths;
                let h1 = l[0] / cfg.grid as f64;
                let (a, b, c) = self.torus_metric();
                let fiber = (b * c).sqrt() * l[1] * l[2];
                a.iter().map(|ai| ai.sqrt() * h1 * fiber).collect()
            }
        }
    }

    /// Weights integrating zonal (sphere) or x1-only (tori) profiles.
    pub fn profile_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Closed-form volume where one exists.
    pub fn analytic_volume(&self) -> Option<f64> {
        let cfg = &self.model.cfg;
        match cfg.variant {
            Variant::RoundSphere => Some(
                unit_sphere_area(cfg.dimension) * self.conformal().powf(cfg.dimension as f64 / 2.0),
            ),
            Variant::TorusLinear => {
                let l = cfg.torus_lengths;
                Some((self.dofs[0] * self.dofs[1] * self.dofs[2]).sqrt() * l[0] * l[1] * l[2])
            }
            Variant::CoupledCircle => None,
        }
    }

    /// Node measure weights for a field of the given shape.
    pub fn weights(&self, shape: Shape) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        match (cfg.variant, shape) {
            (Variant::RoundSphere, Shape::Zonal(nodes)) => {
                if nodes == self.weights.len() {
                    return Ok(self.weights.clone());
                }
                let m = nodes
                    .checked_sub(1)
                    .filter(|m| *m >= 2 && m % 2 == 0)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "zonal field needs an odd node count >= 3, got {nodes}"
                        ))
                    })?;
                let scale = self.conformal().powf(cfg.dimension as f64 / 2.0);
                Ok(unit_zonal_weights(cfg.dimension, m)
                    .into_iter()
                    .map(|w| w * scale)
                    .collect())
            }
            (Variant::TorusLinear | Variant::CoupledCircle, Shape::Grid(n)) => {
                let w1 = self.x1_weights_line(n[0])?;
                let l = cfg.torus_lengths;
                let (b, c) = (self.axis_coefficient(1, 0), self.axis_coefficient(2, 0));
                let fiber_cell = (b * c).sqrt() * (l[1] / n[1] as f64) * (l[2] / n[2] as f64);
                let mut w = Vec::with_capacity(shape.len());
                for wi in w1 {
                    w.extend(std::iter::repeat_n(wi * fiber_cell, n[1] * n[2]));
                }
                Ok(w)
            }
            _ => Err(Error::InvalidConfig(format!(
                "shape {shape:?} does not fit variant {:?}",
                cfg.variant
            ))),
        }
    }

    /// `sqrt(g11) * h1` along an x1 line of `n1` nodes.
    fn x1_weights_line(&self, n1: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let h1 = cfg.torus_lengths[0] / n1 as f64;
        match cfg.variant {
            Variant::TorusLinear => Ok(vec![self.dofs[0].sqrt() * h1; n1]),
            Variant::CoupledCircle => {
                if n1 != cfg.grid {
                    return Err(Error::InvalidConfig(format!(
                        "coupled model fields need {} nodes along x1, got {n1}",
                        cfg.grid
                    )));
                }
                Ok(self.dofs[..n1].iter().map(|a| a.sqrt() * h1).collect())
            }
            Variant::RoundSphere => unreachable!(),
        }
    }

    fn check_shape(&self, f: &ScalarField) -> Result<()> {
        match (self.model.variant(), f.shape) {
            (Variant::RoundSphere, Shape::Zonal(n)) if n >= 3 && (n - 1) % 2 == 0 => Ok(()),
            (Variant::TorusLinear, Shape::Grid(n)) if n.iter().all(|&k| k >= 4) => Ok(()),
            (Variant::CoupledCircle, Shape::Grid(n))
                if n[0] == self.model.grid() && n[1] >= 4 && n[2] >= 4 =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!(
                "field shape {:?} does not fit variant {:?}",
                f.shape,
                self.model.variant()
            ))),
        }
    }

    fn check_metric(&self) -> Result<()> {
        for (i, &v) in self.dofs[self.model.metric_dof_range()].iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::NonPositiveMetric(format!(
                    "metric dof {i} = {v} at t = {}",
                    self.time
                )));
            }
        }
        Ok(())
    }
}

/// Curvature and map quantities. Components are taken in the orthonormal
/// coordinate frame, so the traces of `ric_diag` and `s_diag` are `r` and `s`.
/// Profiles run along theta (sphere) or x1 (tori).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureData {
    pub alpha: f64,
    pub r: Vec<f64>,
    pub ric_diag: Vec<Vec<f64>>,
    pub grad_phi_sq: Vec<f64>,
    pub s: Vec<f64>,
    pub s_diag: Vec<Vec<f64>>,
    pub tension: Vec<f64>,
}

impl CurvatureData {
    pub fn min_s(&self) -> f64 {
        self.s.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_s(&self) -> f64 {
        self.s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// First and second x1-derivatives of the map `phi = kappa x1 + psi`.
pub(crate) fn map_derivatives(state: &GeometryState) -> (Vec<f64>, Vec<f64>) {
    let model = state.model();
    let kappa = model.config().kappa();
    match model.variant() {
        Variant::CoupledCircle => {
            let d = model.x1_diff().expect("periodic model");
            let psi = state.psi();
            let d1 = d.d1(psi).into_iter().map(|v| v + kappa).collect();
            (d1, d.d2(psi))
        }
        _ => (vec![kappa; model.grid()], vec![0.0; model.grid()]),
    }
}

pub fn curvature(state: &GeometryState) -> Result<CurvatureData> {
    state.check_metric()?;
    let model = state.model();
    let n = model.dimension();
    let alpha = state.alpha();
    match model.variant() {
        Variant::RoundSphere => {
            let nodes = model.grid() + 1;
            let c = state.conformal();
            let ric = (n as f64 - 1.0) / c;
            let r = n as f64 * ric;
            Ok(CurvatureData {
                alpha,
                r: vec![r; nodes],
                ric_diag: vec![vec![ric; n]; nodes],
                grad_phi_sq: vec![0.0; nodes],
                s: vec![r; nodes],
                s_diag: vec![vec![ric; n]; nodes],
                tension: vec![0.0; nodes],
            })
        }
        Variant::TorusLinear | Variant::CoupledCircle => {
            let nodes = model.grid();
            let (a, _, _) = state.torus_metric();
            let (dphi, d2phi) = map_derivatives(state);
            let grad: Vec<f64> = dphi.iter().zip(&a).map(|(p, ai)| p * p / ai).collect();
            let tension = match model.variant() {
                Variant::CoupledCircle => {
                    let da = model.x1_diff().expect("periodic model").d1(&a);
                    (0..nodes)
                        .map(|i| (d2phi[i] - da[i] / (2.0 * a[i]) * dphi[i]) / a[i])
                        .collect()
                }
                _ => vec![0.0; nodes],
            };
            let s: Vec<f64> = grad.iter().map(|g| -alpha * g).collect();
            Ok(CurvatureData {
                alpha,
                r: vec![0.0; nodes],
                ric_diag: vec![vec![0.0; 3]; nodes],
                grad_phi_sq: grad,
                s_diag: s.iter().map(|&si| vec![si, 0.0, 0.0]).collect(),
                s,
                tension,
            })
        }
    }
}

/// Applies `f -> (1/sqrt(a)) D ((1/sqrt(a)) D f)` along one periodic line.
pub(crate) fn flux_laplacian_line(d: &PeriodicDiff, inv_sqrt_a: &[f64], f: &[f64]) -> Vec<f64> {
    let mut g = d.d1(f);
    for (gi, s) in g.iter_mut().zip(inv_sqrt_a) {
        *gi *= s;
    }
    let mut out = d.d1(&g);
    for (oi, s) in out.iter_mut().zip(inv_sqrt_a) {
        *oi *= s;
    }
    out
}

/// Applies `op` to every line of a row-major 3-D array along `axis`.
pub(crate) fn map_lines(
    n: [usize; 3],
    values: &[f64],
    axis: usize,
    mut op: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let strides = [n[1] * n[2], n[2], 1];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let mut out = vec![0.0; values.len()];
    let mut line = vec![0.0; n[axis]];
    for p in 0..n[others[0]] {
        for q in 0..n[others[1]] {
            let base = p * strides[others[0]] + q * strides[others[1]];
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = values[base + j * strides[axis]];
            }
            // the x1 index is needed for coefficients on the other axes
            let x1 = if axis == 0 { 0 } else { p };
            let r = op(x1, &line);
            for (j, v) in r.into_iter().enumerate() {
                out[base + j * strides[axis]] = v;
            }
        }
    }
    out
}

pub fn laplacian_apply(state: &GeometryState, f: &ScalarField) -> Result<ScalarField> {
    state.check_metric()?;
    state.check_shape(f)?;
    let model = state.model();
    let values = match f.shape {
        Shape::Zonal(nodes) => {
            let m = nodes - 1;
            let own;
            let z = match model.zonal_diff() {
                Some(z) if z.intervals() == m => z,
                _ => {
                    own = ZonalDiff::new(m);
                    &own
                }
            };
            let n = model.dimension() as f64;
            let c = state.conformal();
            let (d1, d2) = z.derivatives(&f.values);
            (0..nodes)
                .map(|i| {
                    if i == 0 || i == m {
                        n * d2[i] / c
                    } else {
                        let th = i as f64 * PI / m as f64;
                        (d2[i] + (n - 1.0) * th.cos() / th.sin() * d1[i]) / c
                    }
                })
                .collect()
        }
        Shape::Grid(n) => {
            let l = model.config().torus_lengths;
            let own;
            let d0 = match model.x1_diff() {
                Some(d) if d.len() == n[0] => d,
                _ => {
                    own = PeriodicDiff::new(n[0], l[0]);
                    &own
                }
            };
            let inv_sqrt_a: Vec<f64> = match model.variant() {
                Variant::TorusLinear => vec![1.0 / state.dofs[0].sqrt(); n[0]],
                _ => state.dofs[..n[0]].iter().map(|a| 1.0 / a.sqrt()).collect(),
            };
            let mut total = map_lines(n, &f.values, 0, |_, line| {
                flux_laplacian_line(d0, &inv_sqrt_a, line)
            });
            for axis in 1..3 {
                let d = PeriodicDiff::new(n[axis], l[axis]);
                let coef = 1.0 / state.axis_coefficient(axis, 0);
                let part = map_lines(n, &f.values, axis, |_, line| {
                    d.d2(line).into_iter().map(|v| v * coef).collect()
                });
                for (t, p) in total.iter_mut().zip(part) {
                    *t += p;
                }
            }
            total
        }
    };
    Ok(ScalarField {
        shape: f.shape,
        values,
    })
}

/// `|grad f|^2` at every node.
pub fn grad_sq(state: &GeometryState, f: &ScalarField) -> Result<Vec<f64>> {
    state.check_metric()?;
    state.check_shape(f)?;
    let model = state.model();
    match f.shape {
        Shape::Zonal(nodes) => {
            let z = ZonalDiff::new(nodes - 1);
            let (d1, _) = z.derivatives(&f.values);
            let c = state.conformal();
            Ok(d1.into_iter().map(|v| v * v / c).collect())
        }
        Shape::Grid(n) => {
            let l = model.config().torus_lengths;
            let mut out = vec![0.0; f.values.len()];
            for axis in 0..3 {
                let d = PeriodicDiff::new(n[axis], l[axis]);
                let part = map_lines(n, &f.values, axis, |_, line| d.d1(line));
                let stride0 = n[1] * n[2];
                for (idx, (o, p)) in out.iter_mut().zip(part).enumerate() {
                    let coef = state.axis_coefficient(axis, idx / stride0);
                    *o += p * p / coef;
                }
            }
            Ok(out)
        }
    }
}

pub fn integrate(state: &GeometryState, f: &ScalarField) -> Result<f64> {
    state.check_shape(f)?;
    let w = state.weights(f.shape)?;
    Ok(w.iter().zip(&f.values).map(|(w, v)| w * v).sum())
}
