//! Integration of the coupled metric/map flow reduced to the model
//! geometries, with cubic Hermite dense output.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{curvature, map_derivatives, GeometryState, Model, Variant};

/// Relative floor below which a metric degree of freedom counts as degenerate.
pub const DEGENERACY_FRACTION: f64 = 1e-8;
/// Safety factor in the parabolic step limit of the coupled model.
pub const CFL_SAFETY: f64 = 0.5;
const MAX_REJECTIONS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Integrator {
    Rk4,
    Rk45Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub t_end: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub rtol: f64,
    pub atol: f64,
    pub checkpoint_stride: usize,
    /// Test mode: the metric and map are held at their initial values.
    pub frozen: bool,
}

impl FlowParams {
    pub fn new(t_end: f64, dt: f64) -> Self {
        Self {
            t_end,
            dt,
            integrator: Integrator::Rk4,
            rtol: 1e-10,
            atol: 1e-12,
            checkpoint_stride: 1,
            frozen: false,
        }
    }

    pub fn adaptive(mut self, rtol: f64, atol: f64) -> Self {
        self.integrator = Integrator::Rk45Adaptive;
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_end) {
            return Err(Error::InvalidConfig(format!(
                "dt must lie in (0, t_end], got {} with t_end = {}",
                self.dt, self.t_end
            )));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint_stride must be positive".into(),
            ));
        }
        if self.integrator == Integrator::Rk45Adaptive && !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidConfig(
                "rtol and atol must be positive".into(),
            ));
        }
        if let Some(limit) = model.config().degeneracy_time() {
            if !self.frozen && self.t_end >= limit {
                return Err(Error::PastDegeneracy {
                    time: self.t_end,
                    limit,
                });
            }
        }
        Ok(())
    }
}

/// Time derivative of every degree of freedom.
pub fn flow_rhs(state: &GeometryState) -> Result<Vec<f64>> {
    let model = state.model();
    match model.variant() {
        Variant::RoundSphere => {
            curvature(state)?;
            Ok(vec![-2.0 * (model.dimension() as f64 - 1.0)])
        }
        Variant::TorusLinear => {
            let k = model.config().kappa();
            curvature(state)?;
            Ok(vec![2.0 * state.alpha() * k * k, 0.0, 0.0])
        }
        Variant::CoupledCircle => {
            let curv = curvature(state)?;
            let (dphi, _) = map_derivatives(state);
            let alpha = curv.alpha;
            let mut rhs: Vec<f64> = dphi.iter().map(|p| 2.0 * alpha * p * p).collect();
            rhs.extend_from_slice(&curv.tension);
            Ok(rhs)
        }
    }
}

/// Exact state for the sphere and the linear torus.
pub fn closed_form(model: &Arc<Model>, t: f64) -> Result<GeometryState> {
    let cfg = model.config();
    let y0 = cfg.initial_dofs();
    let dofs = match cfg.variant {
        Variant::RoundSphere => {
            let limit = cfg.degeneracy_time().expect("sphere");
            if t >= limit {
                return Err(Error::PastDegeneracy { time: t, limit });
            }
            vec![y0[0] - 2.0 * (cfg.dimension as f64 - 1.0) * t]
        }
        Variant::TorusLinear => {
            let k = cfg.kappa();
            vec![
                y0[0] + 2.0 * k * k * cfg.coupling.integral(0.0, t),
                y0[1],
                y0[2],
            ]
        }
        Variant::CoupledCircle => {
            return Err(Error::UnsupportedVariant(
                "no closed form for COUPLED_CIRCLE".into(),
            ));
        }
    };
    GeometryState::new(model.clone(), t, dofs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub dofs: Vec<f64>,
    pub rate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    model: Arc<Model>,
    params: FlowParams,
    checkpoints: Vec<Checkpoint>,
}

impl FlowTrajectory {
    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.params.frozen
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn t_end(&self) -> f64 {
        self.checkpoints.last().map_or(0.0, |c| c.time)
    }

    pub fn initial_state(&self) -> GeometryState {
        self.checkpoint_state(0)
    }

    pub fn checkpoint_state(&self, i: usize) -> GeometryState {
        let c = &self.checkpoints[i];
        GeometryState::new(self.model.clone(), c.time, c.dofs.clone())
            .expect("stored checkpoints are valid")
    }

    /// Degrees of freedom at `t` by cubic Hermite interpolation.
    pub fn dofs_at(&self, t: f64) -> Result<Vec<f64>> {
        let end = self.t_end();
        let tol = 1e-12 * end.max(1.0);
        if !(t >= -tol && t <= end + tol) {
            return Err(Error::InvalidConfig(format!(
                "time {t} outside the trajectory range [0, {end}]"
            )));
        }
        let t = t.clamp(0.0, end);
        let cps = &self.checkpoints;
        let j = cps.partition_point(|c| c.time <= t);
        if j == 0 {
            return Ok(cps[0].dofs.clone());
        }
        let a = &cps[j - 1];
        if a.time == t || j == cps.len() {
            return Ok(a.dofs.clone());
        }
        let b = &cps[j];
        let h = b.time - a.time;
        let s = (t - a.time) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok((0..a.dofs.len())
            .map(|i| h00 * a.dofs[i] + h10 * h * a.rate[i] + h01 * b.dofs[i] + h11 * h * b.rate[i])
            .collect())
    }

    pub fn state_at(&self, t: f64) -> Result<GeometryState> {
        let dofs = self.dofs_at(t)?;
        GeometryState::new(self.model.clone(), t.clamp(0.0, self.t_end()), dofs)
    }

    /// Writes `time, <metric columns>, min_S, max_S, volume`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let metric_cols: Vec<&str> = match self.model.variant() {
            Variant::RoundSphere => vec!["r2"],
            Variant::TorusLinear => vec!["g11", "g22", "g33"],
            Variant::CoupledCircle => vec!["A_min", "A_mean", "A_max"],
        };
        let mut header = vec!["time"];
        header.extend(metric_cols);
        header.extend(["min_S", "max_S", "volume"]);
        w.write_record(&header)?;
        for i in 0..self.checkpoints.len() {
            let st = self.checkpoint_state(i);
            let curv = curvature(&st)?;
            let mut row = vec![fmt(st.time)];
            match self.model.variant() {
                Variant::CoupledCircle => {
                    let a = &st.dofs()[..self.model.grid()];
                    let min = a.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mean = a.iter().sum::<f64>() / a.len() as f64;
                    row.extend([fmt(min), fmt(mean), fmt(max)]);
                }
                _ => row.extend(st.dofs().iter().map(|&v| fmt(v))),
            }
            row.extend([fmt(curv.min_s()), fmt(curv.max_s()), fmt(st.volume())]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Dirichlet energy of the map, `int |grad phi|^2 dmu`.
pub fn map_energy(state: &GeometryState) -> Result<f64> {
    let curv = curvature(state)?;
    match state.model().variant() {
        Variant::RoundSphere => Ok(0.0),
        _ => Ok(state
            .profile_weights()
            .iter()
            .zip(&curv.grad_phi_sq)
            .map(|(w, g)| w * g)
            .sum()),
    }
}

struct Stepper<'a> {
    model: &'a Arc<Model>,
    floor: Vec<f64>,
}

impl Stepper<'_> {
    fn rhs(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        let st = self.state(t, y)?;
        flow_rhs(&st)
    }

    fn state(&self, t: f64, y: &[f64]) -> Result<GeometryState> {
        let range = self.model.metric_dof_range();
        for (i, (&v, &f)) in y[range].iter().zip(&self.floor).enumerate() {
            if !(v >= f) {
                return Err(Error::DegenerateMetric {
                    time: t,
                    detail: format!("metric dof {i} = {v:e} fell below {DEGENERACY_FRACTION:e} of its initial value"),
                });
            }
        }
        GeometryState::new(self.model.clone(), t, y.to_vec()).map_err(|e| match e {
            Error::NonPositiveMetric(detail) => Error::DegenerateMetric { time: t, detail },
            other => other,
        })
    }

    /// Largest stable step for the map equation of the coupled model.
    fn step_limit(&self, y: &[f64]) -> f64 {
        match self.model.variant() {
            Variant::CoupledCircle => {
                let n = self.model.grid();
                let h = self.model.config().torus_lengths[0] / n as f64;
                let min_a = y[..n].iter().copied().fold(f64::INFINITY, f64::min);
                CFL_SAFETY * h * h * min_a / 2.0
            }
            _ => f64::INFINITY,
        }
    }

    fn rk4(&self, t: f64, y: &[f64], k1: &[f64], h: f64) -> Result<Vec<f64>> {
        let axpy =
            |k: &[f64], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
        let k2 = self.rhs(t + 0.5 * h, &axpy(k1, 0.5 * h))?;
        let k3 = self.rhs(t + 0.5 * h, &axpy(&k2, 0.5 * h))?;
        let k4 = self.rhs(t + h, &axpy(&k3, h))?;
        Ok((0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates the flow on `[0, t_end]`.
pub fn run_flow(model: &Arc<Model>, params: &FlowParams) -> Result<FlowTrajectory> {
    params.validate(model)?;
    let y0 = model.config().initial_dofs();
    let s0 = GeometryState::new(model.clone(), 0.0, y0.clone())?;
    if params.frozen {
        let zero = vec![0.0; y0.len()];
        curvature(&s0)?;
        let checkpoints = vec![
            Checkpoint {
                time: 0.0,
                dofs: y0.clone(),
                rate: zero.clone(),
            },
            Checkpoint {
                time: params.t_end,
                dofs: y0,
                rate: zero,
            },
        ];
        return Ok(FlowTrajectory {
            model: model.clone(),
            params: *params,
            checkpoints,
        });
    }
    let floor = y0[model.metric_dof_range()]
        .iter()
        .map(|v| v * DEGENERACY_FRACTION)
        .collect();
    let stepper = Stepper { model, floor };
    let mut stops = model.config().coupling.breakpoints(0.0, params.t_end);
    stops.push(params.t_end);
    let checkpoints = match params.integrator {
        Integrator::Rk4 => integrate_rk4(&stepper, params, y0, &stops)?,
        Integrator::Rk45Adaptive => integrate_dp45(&stepper, params, y0, &stops)?,
    };
    Ok(FlowTrajectory {
        model: model.clone(),
        params: *params,
        checkpoints,
    })
}

fn integrate_rk4(
    st: &Stepper,
    params: &FlowParams,
    y0: Vec<f64>,
    stops: &[f64],
) -> Result<Vec<Checkpoint>> {
    let mut t = 0.0;
    let mut y = y0;
    let mut k = st.rhs(t, &y)?;
    let mut out = vec![Checkpoint {
        time: t,
        dofs: y.clone(),
        rate: k.clone(),
    }];
    let mut count = 0usize;
    for &stop in stops {
        let span = stop - t;
        // uniform steps inside each smooth segment
        let mut n = (span / params.dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let mut h = span / n as f64;
        let mut i = 0;
        while i < n {
            let limit = st.step_limit(&y);
            if h > limit {
                let remaining = stop - t;
                n = i + (remaining / limit).ceil() as usize;
                h = remaining / (n - i) as f64;
            }
            let t_next = if i + 1 == n { stop } else { t + h };
            y = st.rk4(t, &y, &k, t_next - t)?;
            t = t_next;
            k = st.rhs(t, &y)?;
            i += 1;
            count += 1;
            if count.is_multiple_of(params.checkpoint_stride) || i == n {
                out.push(Checkpoint {
                    time: t,
                    dofs: y.clone(),
                    rate: k.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn integrate_dp45(
    st: &Stepper,
    params: &FlowParams,
    y0: Vec<f64>,
    stops: &[f64],
) -> Result<Vec<Checkpoint>> {
    let mut t = 0.0;
    let mut y = y0;
    let mut k1 = st.rhs(t, &y)?;
    let mut out = vec![Checkpoint {
        time: t,
        dofs: y.clone(),
        rate: k1.clone(),
    }];
    let mut h = params.dt;
    let mut count = 0usize;
    for &stop in stops {
        while t < stop {
            let mut rejections = 0;
            loop {
                h = h.min(st.step_limit(&y));
                let last = t + h >= stop * (1.0 - 1e-14) || stop - (t + h) < 1e-14 * stop.max(1.0);
                let step = if last { stop - t } else { h };
                let trial = dp_step(st, t, &y, &k1, step);
                let (y_new, k_new, err) = match trial {
                    Ok(v) => v,
                    Err(Error::DegenerateMetric { .. })
                        if rejections < MAX_REJECTIONS && step > 1e-14 =>
                    {
                        rejections += 1;
                        h = 0.25 * step;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let norm = y
                    .iter()
                    .zip(&y_new)
                    .zip(&err)
                    .map(|((a, b), e)| e.abs() / (params.atol + params.rtol * a.abs().max(b.abs())))
                    .fold(0.0, f64::max);
                if norm <= 1.0 {
                    t = if last { stop } else { t + step };
                    y = y_new;
                    k1 = k_new;
                    count += 1;
                    let factor = if norm == 0.0 {
                        5.0
                    } else {
                        (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
                    };
                    h = (step * factor).max(1e-14);
                    if count.is_multiple_of(params.checkpoint_stride) || last {
                        out.push(Checkpoint {
                            time: t,
                            dofs: y.clone(),
                            rate: k1.clone(),
                        });
                    }
                    break;
                }
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(Error::StepRejectedLimit(t));
                }
                h = step * (0.9 * norm.powf(-0.2)).clamp(0.1, 0.9);
            }
        }
    }
    Ok(out)
}

type DpTrial = (Vec<f64>, Vec<f64>, Vec<f64>);

fn dp_step(st: &Stepper, t: f64, y: &[f64], k1: &[f64], h: f64) -> Result<DpTrial> {
    let m = y.len();
    let mut ks: Vec<Vec<f64>> = vec![k1.to_vec()];
    for stage in 1..7 {
        let yi: Vec<f64> = (0..m)
            .map(|i| y[i] + h * (0..stage).map(|j| DP_A[stage][j] * ks[j][i]).sum::<f64>())
            .collect();
        ks.push(st.rhs(t + DP_C[stage] * h, &yi)?);
    }
    let y_new: Vec<f64> = (0..m)
        .map(|i| y[i] + h * (0..6).map(|j| DP_A[6][j] * ks[j][i]).sum::<f64>())
        .collect();
    let err = (0..m)
        .map(|i| h * (0..7).map(|j| DP_E[j] * ks[j][i]).sum::<f64>())
        .collect();
    let k_new = ks.pop().expect("seven stages");
    Ok((y_new, k_new, err))
}
