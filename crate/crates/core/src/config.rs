//! JSON run configuration and the pipeline steps built from it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::{ComparisonInputs, Sample};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowParams, FlowTrajectory, Integrator};
use crate::geometry::{CouplingSchedule, ManifoldConfig, Model, Variant};
use crate::heatkernel::KernelOptions;
use crate::sobolev::{estimate_ab, AConvention, SobolevConstants, SobolevOptions};

/// Periodic profile given either as samples or as a short Fourier series
/// `mean + sum_k cos[k] cos(2 pi (k+1) x / L) + sin[k] sin(...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Samples(Vec<f64>),
    Harmonics {
        mean: f64,
        #[serde(default)]
        cos: Vec<f64>,
        #[serde(default)]
        sin: Vec<f64>,
    },
}

impl ProfileSpec {
    fn sample(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            ProfileSpec::Samples(v) if v.len() == n => Ok(v.clone()),
            ProfileSpec::Samples(v) => Err(Error::InvalidConfig(format!(
                "profile has {} samples, grid is {n}",
                v.len()
            ))),
            ProfileSpec::Harmonics { mean, cos, sin } => Ok((0..n)
                .map(|i| {
                    let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    let c: f64 = cos
                        .iter()
                        .enumerate()
                        .map(|(k, a)| a * ((k + 1) as f64 * x).cos())
                        .sum();
                    let s: f64 = sin
                        .iter()
                        .enumerate()
                        .map(|(k, a)| a * ((k + 1) as f64 * x).sin())
                        .sum();
                    mean + c + s
                })
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub variant: Variant,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    pub grid: usize,
    pub coupling: CouplingSchedule,
    #[serde(default)]
    pub radius0: Option<f64>,
    #[serde(default)]
    pub lengths: Option<[f64; 3]>,
    /// Diagonal `(A, B, C)` of the linear torus.
    #[serde(default)]
    pub metric: Option<[f64; 3]>,
    #[serde(default)]
    pub winding: Option<i64>,
    /// Fiber coefficients `(B, C)` of the coupled model.
    #[serde(default)]
    pub fibers: Option<[f64; 2]>,
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    #[serde(default)]
    pub psi: Option<ProfileSpec>,
}

fn default_dimension() -> usize {
    3
}

fn missing(field: &str, variant: Variant) -> Error {
    Error::InvalidConfig(format!("{variant:?} needs `{field}`"))
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<ManifoldConfig> {
        let v = self.variant;
        let lengths = || self.lengths.ok_or_else(|| missing("lengths", v));
        let cfg = match v {
            Variant::RoundSphere => ManifoldConfig::round_sphere(
                self.dimension,
                self.radius0.ok_or_else(|| missing("radius0", v))?,
                self.grid,
                self.coupling,
            ),
            Variant::TorusLinear => {
                let mut c = ManifoldConfig::torus_linear(
                    lengths()?,
                    self.metric.ok_or_else(|| missing("metric", v))?,
                    self.winding.ok_or_else(|| missing("winding", v))?,
                    self.grid,
                    self.coupling,
                );
                c.dimension = self.dimension;
                c
            }
            Variant::CoupledCircle => {
                let fibers = self.fibers.ok_or_else(|| missing("fibers", v))?;
                let a = self
                    .profile
                    .as_ref()
                    .ok_or_else(|| missing("profile", v))?
                    .sample(self.grid)?;
                let psi = match &self.psi {
                    Some(p) => p.sample(self.grid)?,
                    None => vec![0.0; self.grid],
                };
                let mut c = ManifoldConfig::coupled_circle(
                    lengths()?,
                    a,
                    (fibers[0], fibers[1]),
                    self.winding.ok_or_else(|| missing("winding", v))?,
                    psi,
                    self.coupling,
                );
                c.dimension = self.dimension;
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_stride")]
    pub checkpoint_stride: usize,
    #[serde(default)]
    pub frozen: bool,
}

fn default_rtol() -> f64 {
    1e-10
}

fn default_atol() -> f64 {
    1e-12
}

fn default_stride() -> usize {
    1
}

impl FlowSpec {
    pub fn params(&self) -> FlowParams {
        FlowParams {
            t_end: self.t_end,
            dt: self.dt,
            integrator: if self.adaptive {
                Integrator::Rk45Adaptive
            } else {
                Integrator::Rk4
            },
            rtol: self.rtol,
            atol: self.atol,
            checkpoint_stride: self.checkpoint_stride,
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SobolevSpec {
    #[serde(default)]
    pub a_convention: AConvention,
    /// Estimation times; defaults to five equally spaced times on `[0, t_end]`.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// User-supplied `(t, A, B)` triples replacing the probe estimate.
    #[serde(default, rename = "override")]
    pub override_curve: Option<Vec<(f64, f64, f64)>>,
    #[serde(default = "default_fiber")]
    pub probe_fiber: usize,
    #[serde(default = "default_bisection_rtol")]
    pub bisection_rtol: f64,
}

fn default_fiber() -> usize {
    32
}

fn default_bisection_rtol() -> f64 {
    1e-4
}

impl Default for SobolevSpec {
    fn default() -> Self {
        Self {
            a_convention: AConvention::default(),
            times: None,
            override_curve: None,
            probe_fiber: default_fiber(),
            bisection_rtol: default_bisection_rtol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: ManifoldSpec,
    pub flow: FlowSpec,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub sobolev: SobolevSpec,
    #[serde(default)]
    pub samples: Vec<Sample>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without running the flow,
    /// theorem hypotheses included.
    pub fn validate(&self) -> Result<()> {
        let manifold = self.manifold.build()?;
        let model = Model::new(manifold)?;
        self.flow.params().validate(&model)?;
        self.kernel.validate()?;
        let end = self.flow.t_end;
        let in_range = |t: f64| (0.0..=end).contains(&t);
        for smp in &self.samples {
            if !(in_range(smp.s) && in_range(smp.t)) {
                return Err(Error::InvalidConfig(format!(
                    "sample times {} and {} outside [0, {end}]",
                    smp.s, smp.t
                )));
            }
            if smp.s >= smp.t {
                return Err(Error::BadTimeOrder { s: smp.s, t: smp.t });
            }
        }
        if let Some(times) = &self.sobolev.times {
            if times.is_empty() || times.iter().any(|&t| !in_range(t)) {
                return Err(Error::InvalidConfig(format!(
                    "Sobolev times must be non-empty and inside [0, {end}]"
                )));
            }
        }
        if self.sobolev.probe_fiber < 4 || self.sobolev.probe_fiber % 2 == 1 {
            return Err(Error::InvalidConfig(
                "probe_fiber must be even and at least 4".into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Arc<Model>> {
        Model::new(self.manifold.build()?)
    }

    pub fn trajectory(&self) -> Result<FlowTrajectory> {
        run_flow(&self.model()?, &self.flow.params())
    }

    pub fn sobolev_options(&self) -> SobolevOptions {
        SobolevOptions {
            a_convention: self.sobolev.a_convention,
            seed: self.seed,
            probe_fiber: self.sobolev.probe_fiber,
            bisection_rtol: self.sobolev.bisection_rtol,
        }
    }

    pub fn sobolev_times(&self) -> Vec<f64> {
        match &self.sobolev.times {
            Some(t) => t.clone(),
            None => (0..5).map(|i| self.flow.t_end * i as f64 / 4.0).collect(),
        }
    }

    /// Override curves when configured, probe estimates otherwise.
    pub fn sobolev_constants(
        &self,
        traj: &FlowTrajectory,
        times: Option<&[f64]>,
    ) -> Result<SobolevConstants> {
        match &self.sobolev.override_curve {
            Some(triples) => {
                SobolevConstants::from_override(traj, self.sobolev.a_convention, triples)
            }
            None => {
                let default_times = self.sobolev_times();
                estimate_ab(
                    traj,
                    times.unwrap_or(&default_times),
                    &self.sobolev_options(),
                )
            }
        }
    }

    pub fn comparison_inputs(&self, traj: &FlowTrajectory) -> Result<ComparisonInputs> {
        ComparisonInputs::new(traj, self.sobolev_constants(traj, None)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPHERE: &str = r#"{
        "manifold": {"variant": "ROUND_SPHERE", "grid": 64, "radius0": 1.0,
                     "coupling": {"form": "CONSTANT", "alpha0": 0.5, "rate": 0.0, "floor": 0.5}},
        "flow": {"t_end": 0.1, "dt": 0.01},
        "samples": [{"x": [32, 0, 0], "t": 0.05, "y": [0, 0, 0], "s": 0.0}]
    }"#;

    #[test]
    fn sphere_config_loads_with_defaults() {
        let cfg = RunConfig::from_json(SPHERE).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.kernel, KernelOptions::default());
        let times = cfg.sobolev_times();
        assert_eq!(times.len(), 5);
        assert!(times
            .iter()
            .zip([0.0, 0.025, 0.05, 0.075, 0.1])
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let traj = cfg.trajectory().unwrap();
        assert_eq!(traj.model().variant(), Variant::RoundSphere);
    }

    #[test]
    fn increasing_alpha_is_a_hypothesis_violation() {
        let text = SPHERE.replace(
            r#""form": "CONSTANT", "alpha0": 0.5, "rate": 0.0, "floor": 0.5"#,
            r#""form": "LINEAR_FLOOR", "alpha0": 0.5, "rate": -1.0, "floor": 0.5"#,
        );
        match RunConfig::from_json(&text) {
            Err(Error::HypothesisViolated(msg)) => assert!(msg.contains("non-increasing")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn samples_outside_the_run_are_rejected() {
        let text = SPHERE.replace(r#""t": 0.05"#, r#""t": 0.5"#);
        assert!(matches!(
            RunConfig::from_json(&text),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::from_json("{"),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/config.json")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn coupled_profile_from_harmonics() {
        let text = r#"{
            "manifold": {"variant": "COUPLED_CIRCLE", "grid": 16, "lengths": [6.283185307179586, 6.283185307179586, 6.283185307179586],
                         "fibers": [1.0, 1.0], "winding": 1,
                         "profile": {"mean": 1.0, "cos": [0.2]}, "psi": {"mean": 0.0, "sin": [0.1]},
                         "coupling": {"form": "EXPONENTIAL", "alpha0": 0.5, "rate": 1.0, "floor": 0.25}},
            "flow": {"t_end": 0.01, "dt": 0.001}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let m = cfg.manifold.build().unwrap();
        let crate::geometry::MetricData::Profile { a, .. } = m.metric0 else {
            panic!()
        };
        assert!((a[0] - 1.2).abs() < 1e-15 && (a[8] - 0.8).abs() < 1e-15);
        let bad = text.replace(r#"{"mean": 1.0, "cos": [0.2]}"#, "[1.0, 1.0]");
        assert!(matches!(
            RunConfig::from_json(&bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn override_curves_are_echoed() {
        let text = SPHERE.replace(
            r#""flow""#,
            r#""sobolev": {"override": [[0.0, 0.2, 0.0], [0.1, 0.3, 0.1]]}, "flow""#,
        );
        let cfg = RunConfig::from_json(&text).unwrap();
        let traj = cfg.trajectory().unwrap();
        let c = cfg.sobolev_constants(&traj, None).unwrap();
        assert!(!c.estimated);
        assert_eq!(
            (c.times.clone(), c.a.clone(), c.b.clone()),
            (vec![0.0, 0.1], vec![0.2, 0.3], vec![0.0, 0.1])
        );
    }
}
