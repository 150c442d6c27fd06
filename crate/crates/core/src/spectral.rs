//! Differentiation on uniform grids.
//!
//! Periodic grids use Fourier differentiation when the node count is a power
//! of two and 4th-order centered differences otherwise; both are circulant,
//! so both are applied through the FFT with the matching symbol. The first
//! derivative symbol vanishes at the Nyquist wavenumber in either case, which
//! keeps the first-derivative matrix antisymmetric.
//!
//! Zonal profiles on `[0, pi]` are differentiated through their even
//! extension to the circle (a cosine series).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeScheme {
    Spectral,
    FourthOrder,
}

#[derive(Clone)]
pub struct PeriodicDiff {
    n: usize,
    length: f64,
    scheme: DerivativeScheme,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    d1_symbol: Vec<f64>,
    d2_symbol: Vec<f64>,
}

impl fmt::Debug for PeriodicDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicDiff")
            .field("n", &self.n)
            .field("length", &self.length)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl PeriodicDiff {
    pub fn new(n: usize, length: f64) -> Self {
        let scheme = if n.is_power_of_two() {
            DerivativeScheme::Spectral
        } else {
            DerivativeScheme::FourthOrder
        };
        Self::with_scheme(n, length, scheme)
    }

    pub fn with_scheme(n: usize, length: f64, scheme: DerivativeScheme) -> Self {
        assert!(n >= 4, "periodic grid needs at least 4 nodes");
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let h = length / n as f64;
        let mut d1_symbol = vec![0.0; n];
        let mut d2_symbol = vec![0.0; n];
        for j in 0..n {
            match scheme {
                DerivativeScheme::Spectral => {
                    let k = signed_wavenumber(j, n) as f64 * 2.0 * PI / length;
                    let is_nyquist = n.is_multiple_of(2) && j == n / 2;
                    d1_symbol[j] = if is_nyquist { 0.0 } else { k };
                    d2_symbol[j] = -k * k;
                }
                DerivativeScheme::FourthOrder => {
                    let theta = 2.0 * PI * j as f64 / n as f64;
                    d1_symbol[j] = (8.0 * theta.sin() - (2.0 * theta).sin()) / (6.0 * h);
                    d2_symbol[j] =
                        (-30.0 + 32.0 * theta.cos() - 2.0 * (2.0 * theta).cos()) / (12.0 * h * h);
                }
            }
        }
        Self {
            n,
            length,
            scheme,
            forward,
            inverse,
            d1_symbol,
            d2_symbol,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn scheme(&self) -> DerivativeScheme {
        self.scheme
    }

    /// Imaginary part of the first-derivative symbol at FFT index `j`.
    pub fn d1_symbol(&self, j: usize) -> f64 {
        self.d1_symbol[j]
    }

    /// Second-derivative symbol (real, non-positive) at FFT index `j`.
    pub fn d2_symbol(&self, j: usize) -> f64 {
        self.d2_symbol[j]
    }

    pub fn to_spectrum(&self, f: &[f64]) -> Vec<Complex64> {
        assert_eq!(f.len(), self.n);
        let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    pub fn from_spectrum(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut spec);
        let scale = 1.0 / self.n as f64;
        spec.iter().map(|c| c.re * scale).collect()
    }

    pub fn d1(&self, f: &[f64]) -> Vec<f64> {
        let mut spec = self.to_spectrum(f);
        for (j, c) in spec.iter_mut().enumerate() {
            *c *= Complex64::new(0.0, self.d1_symbol[j]);
        }
        self.from_spectrum(spec)
    }

    pub fn d2(&self, f: &[f64]) -> Vec<f64> {
        let mut spec = self.to_spectrum(f);
        for (j, c) in spec.iter_mut().enumerate() {
            *c *= self.d2_symbol[j];
        }
        self.from_spectrum(spec)
    }

    /// Removes the Nyquist (checkerboard) component for even `n`.
    pub fn remove_nyquist(&self, f: &mut [f64]) {
        if !self.n.is_multiple_of(2) {
            return;
        }
        let amp: f64 = f
            .iter()
            .enumerate()
            .map(|(j, &v)| if j % 2 == 0 { v } else { -v })
            .sum::<f64>()
            / self.n as f64;
        for (j, v) in f.iter_mut().enumerate() {
            *v -= if j % 2 == 0 { amp } else { -amp };
        }
    }
}

fn signed_wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Cosine-series differentiation of profiles sampled at `theta_i = i*pi/m`,
/// `i = 0..=m`.
#[derive(Clone)]
pub struct ZonalDiff {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for ZonalDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ZonalDiff")
            .field("intervals", &self.m)
            .finish()
    }
}

impl ZonalDiff {
    pub fn new(intervals: usize) -> Self {
        let mut planner = FftPlanner::new();
        let len = 2 * intervals;
        Self {
            m: intervals,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn intervals(&self) -> usize {
        self.m
    }

    /// First and second theta-derivatives at the nodes.
    pub fn derivatives(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        assert_eq!(f.len(), m + 1);
        let len = 2 * m;
        let mut buf: Vec<Complex64> = (0..len)
            .map(|j| Complex64::new(if j <= m { f[j] } else { f[len - j] }, 0.0))
            .collect();
        self.forward.process(&mut buf);
        let mut b1 = buf.clone();
        for (j, c) in b1.iter_mut().enumerate() {
            let k = if j == m {
                0.0
            } else {
                signed_wavenumber(j, len) as f64
            };
            *c *= Complex64::new(0.0, k);
        }
        for (j, c) in buf.iter_mut().enumerate() {
            let k = signed_wavenumber(j, len) as f64;
            *c *= -k * k;
        }
        self.inverse.process(&mut b1);
        self.inverse.process(&mut buf);
        let scale = 1.0 / len as f64;
        let d1 = (0..=m).map(|j| b1[j].re * scale).collect();
        let d2 = (0..=m).map(|j| buf[j].re * scale).collect();
        (d1, d2)
    }
}
