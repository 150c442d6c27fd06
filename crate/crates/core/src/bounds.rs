//! Heat kernel upper bounds along the flow and the harness that checks them
//! against measured kernels.
//!
//! With `m0 = 1 / inf S(., 0)` the maximum principle gives
//! `S(., tau) >= 1 / (m0 - c_n tau)`, `c_n = 2/n`, and the kernel mass obeys
//! `J(t) <= chi_{t,s}^{n/2}`. Writing `H` for the antiderivative of
//! `B/A - (3/4) / (m0 - c_n tau)` vanishing at `s`, the bound reads
//!
//! `G(x,t;y,s) <= C_n / (I1 I2)^{n/4}`,
//! `I1 = int_s^mid chi_{tau,s}^{-2} e^{2H/n} / A`, `I2 = int_mid^t e^{-2H/n} / A`,
//!
//! with `mid = (s+t)/2` and `C_n = (2/n)^{n/2}`. When `inf S(., 0) >= 0` the
//! curvature term is dropped and `chi = 1`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fmt, FlowTrajectory};
use crate::geometry::{curvature, Variant};
use crate::heatkernel::{kernel, Direction, KernelOptions, Node, SolverTag};
use crate::quadrature::{adaptive_simpson, AdaptiveQuad};
use crate::sobolev::{AConvention, SobolevConstants};

/// Ratios at or above `1 - RATIO_TOLERANCE` pass.
pub const RATIO_TOLERANCE: f64 = 1e-2;
/// Absolute slack of the mass and Cauchy-Schwarz inequalities.
pub const CHAIN_TOLERANCE: f64 = 1e-6;
/// Absolute tolerance of the standalone `H` quadrature.
pub const H_TOLERANCE: f64 = 1e-8;
const DENOMINATOR_FLOOR: f64 = 1e-12;
const NESTED_H_TOLERANCE: f64 = 1e-13;
const OUTER_RELATIVE_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonInputs {
    pub n: usize,
    /// `inf S(., 0)`.
    pub inf_s0: f64,
    /// `1 / inf S(., 0)`; infinite when the infimum is zero.
    pub m0: f64,
    pub positive_case: bool,
    pub c_n: f64,
    pub big_c_n: f64,
    /// `(4K/n)^{n/2}`.
    pub c_tilde: f64,
    /// `(4K^2/n)^{n/2}`.
    pub c_tilde_alt: f64,
    pub sobolev: SobolevConstants,
}

impl ComparisonInputs {
    pub fn new(traj: &FlowTrajectory, sobolev: SobolevConstants) -> Result<Self> {
        let model = traj.model();
        model.config().coupling.validate()?;
        let n = model.dimension();
        let inf_s0 = curvature(&traj.initial_state())?.min_s();
        let nf = n as f64;
        let k = sobolev.k;
        Ok(Self {
            n,
            inf_s0,
            m0: 1.0 / inf_s0,
            positive_case: inf_s0 >= 0.0,
            c_n: 2.0 / nf,
            big_c_n: (2.0 / nf).powf(nf / 2.0),
            c_tilde: (4.0 * k / nf).powf(nf / 2.0),
            c_tilde_alt: (4.0 * k * k / nf).powf(nf / 2.0),
            sobolev,
        })
    }

    /// Replaces `m0` by a user value, keeping the case flag.
    pub fn with_m0(mut self, m0: f64) -> Self {
        self.m0 = m0;
        self
    }

    fn denominator(&self, tau: f64) -> Result<f64> {
        let d = self.m0 - self.c_n * tau;
        if d.abs() < DENOMINATOR_FLOOR {
            return Err(Error::DenominatorZero(d));
        }
        Ok(d)
    }

    /// `1 / (m0 - c_n tau)`, or 0 in the positive case.
    pub fn s_lower_bound(&self, tau: f64) -> Result<f64> {
        if self.positive_case {
            return Ok(0.0);
        }
        Ok(1.0 / self.denominator(tau)?)
    }

    /// `(m0 - c_n t) / (m0 - c_n s)`, or 1 in the positive case.
    pub fn chi(&self, t: f64, s: f64) -> Result<f64> {
        if s > t {
            return Err(Error::BadTimeOrder { s, t });
        }
        if self.positive_case {
            return Ok(1.0);
        }
        Ok(self.denominator(t)? / self.denominator(s)?)
    }

    fn h_density(&self, u: f64) -> Result<f64> {
        Ok(self.sobolev.b_at(u) / self.sobolev.a_at(u) - 0.75 * self.s_lower_bound(u)?)
    }

    /// Breakpoints of the interpolated `A`, `B` curves inside `(a, b)`.
    fn knots(&self, a: f64, b: f64) -> Vec<f64> {
        let mut k = vec![a];
        k.extend(
            self.sobolev
                .times
                .iter()
                .copied()
                .filter(|&x| x > a && x < b),
        );
        k.push(b);
        k
    }

    fn integrate(&self, f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<AdaptiveQuad> {
        let knots = self.knots(a, b);
        let share = tol / (knots.len() - 1) as f64;
        let mut out = AdaptiveQuad {
            value: 0.0,
            panels: Vec::new(),
        };
        for w in knots.windows(2) {
            let q = adaptive_simpson(&f, w[0], w[1], share)?;
            out.value += q.value;
            out.panels.extend(q.panels);
        }
        Ok(out)
    }

    fn check_h_inputs(&self, s: f64, tau: f64) -> Result<()> {
        if s > tau {
            return Err(Error::BadTimeOrder { s, t: tau });
        }
        // surface a vanishing denominator instead of quadrature failure
        self.s_lower_bound(s)?;
        self.s_lower_bound(tau)?;
        Ok(())
    }

    fn h_with_tol(&self, s: f64, tau: f64, tol: f64) -> Result<AdaptiveQuad> {
        self.check_h_inputs(s, tau)?;
        self.integrate(|u| self.h_density(u).unwrap_or(f64::NAN), s, tau, tol)
    }

    /// `H(tau) = int_s^tau (B/A - (3/4) s_lower_bound)`.
    pub fn h_integral(&self, s: f64, tau: f64) -> Result<f64> {
        Ok(self.h_with_tol(s, tau, H_TOLERANCE)?.value)
    }

    fn i1_integrand(&self, s: f64, tau: f64) -> f64 {
        let run = || -> Result<f64> {
            let chi = self.chi(tau, s)?;
            let h = self.h_with_tol(s, tau, NESTED_H_TOLERANCE)?.value;
            Ok((2.0 * h / self.n as f64).exp() / (chi * chi * self.sobolev.a_at(tau)))
        };
        run().unwrap_or(f64::NAN)
    }

    fn i2_integrand(&self, s: f64, tau: f64) -> f64 {
        self.h_with_tol(s, tau, NESTED_H_TOLERANCE)
            .map(|h| (-2.0 * h.value / self.n as f64).exp() / self.sobolev.a_at(tau))
            .unwrap_or(f64::NAN)
    }

    /// Both integrals of the bound together with the quantities built from them.
    pub fn theorem_parts(&self, t: f64, s: f64) -> Result<TheoremParts> {
        if !(s < t) {
            return Err(Error::BadTimeOrder { s, t });
        }
        self.check_h_inputs(s, t)?;
        let mid = 0.5 * (s + t);
        let a0 = self.sobolev.a_at(s);
        let tol = OUTER_RELATIVE_TOLERANCE * (mid - s) / a0.abs().max(f64::MIN_POSITIVE);
        let i1 = self.integrate(|tau| self.i1_integrand(s, tau), s, mid, tol)?;
        let i2 = self.integrate(|tau| self.i2_integrand(s, tau), mid, t, tol)?;
        for (name, q) in [("I1", &i1), ("I2", &i2)] {
            if !(q.value > 0.0) {
                return Err(Error::NonpositiveIntegral(format!("{name} = {}", q.value)));
            }
        }
        let h_mid = self.h_with_tol(s, mid, NESTED_H_TOLERANCE)?.value;
        let e = self.n as f64 / 2.0;
        Ok(TheoremParts {
            mid,
            h_mid,
            bound: self.big_c_n / (i1.value * i2.value).powf(e / 2.0),
            p_bound: self.big_c_n * h_mid.exp() / i1.value.powf(e),
            q_bound: self.big_c_n * (-h_mid).exp() / i2.value.powf(e),
            i1,
            i2,
        })
    }

    pub fn theorem_bound(&self, t: f64, s: f64) -> Result<f64> {
        Ok(self.theorem_parts(t, s)?.bound)
    }

    /// Largest relative change of `I1`, `I2` and `H(mid)` when every
    /// accepted panel is halved.
    pub fn theorem_halving_change(&self, t: f64, s: f64) -> Result<f64> {
        let parts = self.theorem_parts(t, s)?;
        let h = self.h_with_tol(s, parts.mid, NESTED_H_TOLERANCE)?;
        let dh = h.relative_halving_change(|u| self.h_density(u).unwrap_or(f64::NAN));
        let d1 = parts
            .i1
            .relative_halving_change(|tau| self.i1_integrand(s, tau));
        let d2 = parts
            .i2
            .relative_halving_change(|tau| self.i2_integrand(s, tau));
        Ok(dh.max(d1).max(d2))
    }

    fn require_positive(&self, t: f64, s: f64) -> Result<f64> {
        if !self.positive_case {
            return Err(Error::NotPositiveCase);
        }
        if !(s < t) {
            return Err(Error::BadTimeOrder { s, t });
        }
        Ok((t - s).powf(-(self.n as f64) / 2.0))
    }

    /// `(4K/n)^{n/2} (t - s)^{-n/2}`.
    pub fn corollary_bound(&self, t: f64, s: f64) -> Result<f64> {
        Ok(self.c_tilde * self.require_positive(t, s)?)
    }

    /// `(4K^2/n)^{n/2} (t - s)^{-n/2}`, the value implied by `A = K^2`.
    pub fn corollary_bound_alt(&self, t: f64, s: f64) -> Result<f64> {
        Ok(self.c_tilde_alt * self.require_positive(t, s)?)
    }

    /// `min_tau (min S(., tau) - s_lower_bound(tau))` over the checkpoints.
    pub fn s_comparison_margin(&self, traj: &FlowTrajectory) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for (i, cp) in traj.checkpoints().iter().enumerate() {
            let s = curvature(&traj.checkpoint_state(i))?.min_s();
            worst = worst.min(s - self.s_lower_bound(cp.time)?);
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone)]
pub struct TheoremParts {
    pub mid: f64,
    pub h_mid: f64,
    pub bound: f64,
    /// `C_n e^{H(mid)} / I1^{n/2}`, bounding `int G(z,mid;y,s)^2`.
    pub p_bound: f64,
    /// `C_n e^{-H(mid)} / I2^{n/2}`, bounding `int G(x,t;z,mid)^2`.
    pub q_bound: f64,
    pub i1: AdaptiveQuad,
    pub i2: AdaptiveQuad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Node,
    pub t: f64,
    pub y: Node,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub sample: Sample,
    pub solver: SolverTag,
    pub g_actual: f64,
    pub bound_theorem: f64,
    pub bound_corollary: Option<f64>,
    pub bound_corollary_alt: Option<f64>,
    pub ratio_theorem: f64,
    pub ratio_corollary: Option<f64>,
    pub ratio_corollary_alt: Option<f64>,
    pub m0: f64,
    pub chi_mid: f64,
    pub h_mid: f64,
    pub j_t: f64,
    pub jtilde_s: f64,
    pub p_mid: f64,
    pub q_mid: f64,
    pub p_bound: f64,
    pub q_bound: f64,
    pub chi_t: f64,
    /// `G <= sqrt(P Q) + tol`.
    pub cauchy_schwarz_ok: bool,
    /// `J(t) <= chi_{t,s}^{n/2} + tol`.
    pub j_bound_ok: bool,
    pub p_bound_ok: bool,
    pub q_bound_ok: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub variant: Variant,
    pub a_convention: AConvention,
    pub constants_estimated: bool,
    pub positive_case: bool,
    pub k: f64,
    pub c_n: f64,
    pub big_c_n: f64,
    pub c_tilde: f64,
    pub c_tilde_alt: f64,
    pub rows: Vec<BoundRow>,
    pub all_pass: bool,
}

fn node_label(variant: Variant, n: Node) -> String {
    match variant {
        Variant::RoundSphere => n[0].to_string(),
        _ => format!("{}:{}:{}", n[0], n[1], n[2]),
    }
}

fn ratio(bound: f64, g: f64) -> f64 {
    if g > 0.0 {
        bound / g
    } else {
        f64::INFINITY
    }
}

impl BoundReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "x",
            "y",
            "s",
            "t",
            "G_actual",
            "bound_theorem",
            "bound_corollary",
            "ratio_theorem",
            "ratio_corollary",
            "m0",
            "chi_mid",
            "H_mid",
            "J_t",
            "Jtilde_s",
            "P_mid",
            "Q_mid",
            "pass",
        ])?;
        for r in &self.rows {
            w.write_record([
                node_label(self.variant, r.sample.x),
                node_label(self.variant, r.sample.y),
                fmt(r.sample.s),
                fmt(r.sample.t),
                fmt(r.g_actual),
                fmt(r.bound_theorem),
                opt(r.bound_corollary),
                fmt(r.ratio_theorem),
                opt(r.ratio_corollary),
                fmt(r.m0),
                fmt(r.chi_mid),
                fmt(r.h_mid),
                fmt(r.j_t),
                fmt(r.jtilde_s),
                fmt(r.p_mid),
                fmt(r.q_mid),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

fn verify_sample(
    traj: &FlowTrajectory,
    inputs: &ComparisonInputs,
    smp: Sample,
    opts: &KernelOptions,
) -> Result<BoundRow> {
    let Sample { x, t, y, s } = smp;
    let parts = inputs.theorem_parts(t, s)?;
    let mid = parts.mid;
    let fwd = kernel(traj, y, s, t, Direction::Forward, opts)?;
    let conj = kernel(traj, x, s, t, Direction::Conjugate, opts)?;
    let early = kernel(traj, y, s, mid, Direction::Forward, opts)?;
    let late = kernel(traj, x, mid, t, Direction::Conjugate, opts)?;
    let g = fwd.value(x);
    let (j_t, jtilde_s) = (fwd.integral(), conj.integral());
    let (p_mid, q_mid) = (early.integral_sq(), late.integral_sq());
    let chi_t = inputs.chi(t, s)?;
    let n = inputs.n as f64;
    let (bound_corollary, bound_corollary_alt) = if inputs.positive_case {
        (
            Some(inputs.corollary_bound(t, s)?),
            Some(inputs.corollary_bound_alt(t, s)?),
        )
    } else {
        (None, None)
    };
    let ratio_theorem = ratio(parts.bound, g);
    let ratio_corollary = bound_corollary.map(|b| ratio(b, g));
    let ok = |r: f64| r >= 1.0 - RATIO_TOLERANCE;
    let pass = ok(ratio_theorem) && ratio_corollary.is_none_or(ok);
    Ok(BoundRow {
        sample: smp,
        solver: fwd.solver,
        g_actual: g,
        bound_theorem: parts.bound,
        bound_corollary,
        bound_corollary_alt,
        ratio_theorem,
        ratio_corollary,
        ratio_corollary_alt: bound_corollary_alt.map(|b| ratio(b, g)),
        m0: inputs.m0,
        chi_mid: inputs.chi(mid, s)?,
        h_mid: parts.h_mid,
        j_t,
        jtilde_s,
        p_mid,
        q_mid,
        p_bound: parts.p_bound,
        q_bound: parts.q_bound,
        chi_t,
        cauchy_schwarz_ok: g <= (p_mid * q_mid).sqrt() + CHAIN_TOLERANCE,
        j_bound_ok: j_t <= chi_t.powf(n / 2.0) + CHAIN_TOLERANCE,
        p_bound_ok: p_mid <= parts.p_bound * (1.0 + RATIO_TOLERANCE),
        q_bound_ok: q_mid <= parts.q_bound * (1.0 + RATIO_TOLERANCE),
        pass,
    })
}

/// Evaluates both bounds and the intermediate inequalities at every sample.
/// Samples run in parallel; rows keep the input order.
pub fn verify(
    traj: &FlowTrajectory,
    inputs: &ComparisonInputs,
    samples: &[Sample],
    opts: &KernelOptions,
) -> Result<BoundReport> {
    traj.model().config().coupling.validate()?;
    let rows: Vec<BoundRow> = samples
        .par_iter()
        .map(|&smp| verify_sample(traj, inputs, smp, opts))
        .collect::<Result<_>>()?;
    Ok(BoundReport {
        variant: traj.model().variant(),
        a_convention: inputs.sobolev.a_convention,
        constants_estimated: inputs.sobolev.estimated,
        positive_case: inputs.positive_case,
        k: inputs.sobolev.k,
        c_n: inputs.c_n,
        big_c_n: inputs.big_c_n,
        c_tilde: inputs.c_tilde,
        c_tilde_alt: inputs.c_tilde_alt,
        all_pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[cfg(test)]
mod tests;
