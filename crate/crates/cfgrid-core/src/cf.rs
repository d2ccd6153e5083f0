//! Complex-frequency primitives.
//!
//! A Park vector written in log-polar form, `u = exp(kappa + j*theta)`, has
//! the complex frequency (CF)
//!
//! ```text
//!     cf(u) = du/dt / u = d(kappa)/dt + j d(theta)/dt = rho + j*omega
//! ```
//!
//! `rho` is the normalized magnitude rate (1/s for a per-unit signal) and
//! `omega` the instantaneous angular frequency (rad/s). The same definition
//! applies to voltages, currents, and admittances; a DC quantity is the
//! special case `theta = const`, `omega = 0`.
//!
//! [`estimate_cf`] recovers the CF from uniformly sampled data by central
//! differences on `(kappa, theta)` with angle unwrapping. Samples whose
//! magnitude falls below the guard are flagged singular and carry NaN
//! components instead of fabricated values; downstream consumers must skip
//! flagged samples.

use num_complex::Complex64;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

/// Default magnitude guard: below this a sample has no usable phase.
pub const EPS_MAG: f64 = 1e-9;

/// Default denominator guard for admittance/CF divisions.
pub const EPS_SING: f64 = 1e-9;

/// Per-step phase increments at or beyond this limit are ambiguous after
/// wrapping and are treated as aliasing.
const UNWRAP_LIMIT: f64 = PI * (1.0 - 1e-9);

/// Complex frequency `rho + j*omega`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComplexFrequency {
    /// Magnitude rate `d(ln|u|)/dt`, 1/s.
    pub rho: f64,
    /// Angle rate `d(arg u)/dt`, rad/s.
    pub omega: f64,
}

impl ComplexFrequency {
    pub const ZERO: Self = Self { rho: 0.0, omega: 0.0 };

    pub fn new(rho: f64, omega: f64) -> Self {
        Self { rho, omega }
    }

    /// Treats the real part as `rho` and the imaginary part as `omega`.
    pub fn from_complex(z: Complex64) -> Self {
        Self { rho: z.re, omega: z.im }
    }

    pub fn as_complex(self) -> Complex64 {
        Complex64::new(self.rho, self.omega)
    }

    pub fn is_finite(self) -> bool {
        self.rho.is_finite() && self.omega.is_finite()
    }

    /// Placeholder value for flagged-singular samples.
    pub fn nan() -> Self {
        Self { rho: f64::NAN, omega: f64::NAN }
    }
}

impl Add for ComplexFrequency {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.rho + rhs.rho, self.omega + rhs.omega)
    }
}

impl Sub for ComplexFrequency {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.rho - rhs.rho, self.omega - rhs.omega)
    }
}

impl Neg for ComplexFrequency {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.rho, -self.omega)
    }
}

impl Mul<f64> for ComplexFrequency {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.rho * rhs, self.omega * rhs)
    }
}

/// Log-polar representation `u = exp(kappa + j*theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarComplex {
    /// `ln |u|`.
    pub kappa: f64,
    /// `arg u` in `(-pi, pi]`.
    pub theta: f64,
}

impl PolarComplex {
    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.kappa.exp(), self.theta)
    }
}

/// Uniformly sampled complex signal.
#[derive(Debug, Clone)]
pub struct ComplexSignal {
    /// Sample spacing, seconds. Must be positive.
    pub dt: f64,
    pub samples: Vec<Complex64>,
}

impl ComplexSignal {
    pub fn new(dt: f64, samples: Vec<Complex64>) -> Self {
        Self { dt, samples }
    }
}

/// One CF estimate. `singular` samples carry NaN components.
#[derive(Debug, Clone, Copy)]
pub struct CfSample {
    pub cf: ComplexFrequency,
    pub singular: bool,
}

impl CfSample {
    fn flagged() -> Self {
        Self { cf: ComplexFrequency::nan(), singular: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfError {
    #[error("sample {index} has magnitude {magnitude:.3e}, below the {guard:.3e} guard")]
    MagnitudeUnderflow { index: usize, magnitude: f64, guard: f64 },
    #[error("phase step of {step:.6} rad between samples {index} and {}; increments must stay below pi", index + 1)]
    UnwrapAliasing { index: usize, step: f64 },
    #[error("CF estimation needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
}

/// Converts to log-polar form, rejecting magnitudes at or below `eps_mag`.
pub fn to_log_polar(u: Complex64, eps_mag: f64) -> Result<PolarComplex, CfError> {
    let mag = u.norm();
    if mag <= eps_mag {
        return Err(CfError::MagnitudeUnderflow { index: 0, magnitude: mag, guard: eps_mag });
    }
    Ok(PolarComplex { kappa: mag.ln(), theta: u.arg() })
}

/// Time derivative of `u` under the given CF: `du/dt = (rho + j*omega) * u`.
pub fn apply_cf(u: Complex64, cf: ComplexFrequency) -> Complex64 {
    cf.as_complex() * u
}

/// Second-order derivative of uniformly sampled data: central differences in
/// the interior, one-sided three-point stencils at the endpoints.
pub fn sampled_derivative(samples: &[Complex64], dt: f64) -> Vec<Complex64> {
    let n = samples.len();
    assert!(n >= 3, "sampled_derivative needs at least 3 samples");
    assert!(dt > 0.0, "sampled_derivative needs dt > 0");
    let mut out = Vec::with_capacity(n);
    let h2 = 2.0 * dt;
    out.push((-3.0 * samples[0] + 4.0 * samples[1] - samples[2]) / h2);
    for i in 1..n - 1 {
        out.push((samples[i + 1] - samples[i - 1]) / h2);
    }
    out.push((3.0 * samples[n - 1] - 4.0 * samples[n - 2] + samples[n - 3]) / h2);
    out
}

fn wrap_to_pi(x: f64) -> f64 {
    let mut y = x % (2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    } else if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Estimates the per-sample CF of a signal.
///
/// The estimate differentiates `kappa = ln|u|` and the unwrapped phase with
/// the same stencils as [`sampled_derivative`], so interior samples are
/// second-order accurate in `dt`. Phase unwrapping requires per-step
/// increments below pi: a step at the pi boundary is ambiguous in direction
/// and reported as [`CfError::UnwrapAliasing`] rather than guessed around.
/// (Faster rotations alias undetectably; pick `dt` against the fastest
/// frequency expected in the data.)
///
/// Samples with magnitude at or below `eps_mag`, and samples whose stencil
/// touches one, are flagged singular. A real-valued signal of constant sign
/// has exactly zero `omega` at every non-flagged sample.
pub fn estimate_cf(signal: &ComplexSignal, eps_mag: f64) -> Result<Vec<CfSample>, CfError> {
    let n = signal.samples.len();
    if n < 3 {
        return Err(CfError::TooFewSamples(n));
    }
    assert!(signal.dt > 0.0, "estimate_cf needs dt > 0");

    // Log-polar samples; None where the magnitude guard trips.
    let mut polar: Vec<Option<PolarComplex>> = Vec::with_capacity(n);
    for &u in &signal.samples {
        polar.push(to_log_polar(u, eps_mag).ok());
    }

    // Unwrap phase over contiguous non-flagged runs. Each run restarts the
    // accumulator; stencils never straddle a flagged gap.
    let mut theta = vec![0.0_f64; n];
    for i in 0..n {
        if let Some(p) = polar[i] {
            if i > 0 && polar[i - 1].is_some() {
                let step = wrap_to_pi(p.theta - polar[i - 1].unwrap().theta);
                if step.abs() >= UNWRAP_LIMIT {
                    return Err(CfError::UnwrapAliasing { index: i - 1, step });
                }
                theta[i] = theta[i - 1] + step;
            } else {
                theta[i] = p.theta;
            }
        }
    }

    let ok = |i: usize| polar[i].is_some();
    let kappa = |i: usize| polar[i].unwrap().kappa;
    let h2 = 2.0 * signal.dt;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Pick a stencil fully inside the current non-flagged run.
        let sample = if !ok(i) {
            CfSample::flagged()
        } else if i > 0 && i + 1 < n && ok(i - 1) && ok(i + 1) {
            CfSample {
                cf: ComplexFrequency::new(
                    (kappa(i + 1) - kappa(i - 1)) / h2,
                    (theta[i + 1] - theta[i - 1]) / h2,
                ),
                singular: false,
            }
        } else if i + 2 < n && ok(i + 1) && ok(i + 2) && (i == 0 || !ok(i - 1)) {
            CfSample {
                cf: ComplexFrequency::new(
                    (-3.0 * kappa(i) + 4.0 * kappa(i + 1) - kappa(i + 2)) / h2,
                    (-3.0 * theta[i] + 4.0 * theta[i + 1] - theta[i + 2]) / h2,
                ),
                singular: false,
            }
        } else if i >= 2 && ok(i - 1) && ok(i - 2) && (i + 1 == n || !ok(i + 1)) {
            CfSample {
                cf: ComplexFrequency::new(
                    (3.0 * kappa(i) - 4.0 * kappa(i - 1) + kappa(i - 2)) / h2,
                    (3.0 * theta[i] - 4.0 * theta[i - 1] + theta[i - 2]) / h2,
                ),
                singular: false,
            }
        } else {
            // Run too short for any stencil.
            CfSample::flagged()
        };
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn exp_signal(cf: Complex64, u0: Complex64, dt: f64, n: usize) -> ComplexSignal {
        let samples = (0..n).map(|k| u0 * (cf * (k as f64 * dt)).exp()).collect();
        ComplexSignal::new(dt, samples)
    }

    #[test]
    fn log_polar_round_trip() {
        let u = Complex64::new(-0.8, 1.3);
        let p = to_log_polar(u, EPS_MAG).unwrap();
        let back = p.to_complex();
        assert_relative_eq!(back.re, u.re, max_relative = 1e-14);
        assert_relative_eq!(back.im, u.im, max_relative = 1e-14);
    }

    #[test]
    fn log_polar_rejects_zero() {
        match to_log_polar(Complex64::new(0.0, 0.0), EPS_MAG) {
            Err(CfError::MagnitudeUnderflow { .. }) => {}
            other => panic!("expected MagnitudeUnderflow, got {other:?}"),
        }
    }

    #[test]
    fn apply_cf_rotation() {
        // Pure rotation at omega0 on a unit vector is j*omega0.
        let w0 = 2.0 * PI * 50.0;
        let du = apply_cf(Complex64::new(1.0, 0.0), ComplexFrequency::new(0.0, w0));
        assert_eq!(du, Complex64::new(0.0, w0));
        // Pure magnitude growth: rho scales the vector.
        let du = apply_cf(Complex64::new(2.0, 0.0), ComplexFrequency::new(0.1, 0.0));
        assert_relative_eq!(du.re, 0.2, max_relative = 1e-15);
        assert_eq!(du.im, 0.0);
    }

    #[test]
    fn recovers_constant_exponential() {
        // u = exp((0.1 + j*2*pi*50) t): kappa and theta are linear in t, so
        // every stencil (including the one-sided endpoints) is exact up to
        // roundoff; the spec tolerance of 1e-6 is met with margin.
        let cf = Complex64::new(0.1, 2.0 * PI * 50.0);
        let sig = exp_signal(cf, Complex64::new(1.0, 0.0), 1e-4, 1000);
        let est = estimate_cf(&sig, EPS_MAG).unwrap();
        for s in &est {
            assert!(!s.singular);
            assert!((s.cf.rho - 0.1).abs() < 1e-6);
            assert!((s.cf.omega - cf.im).abs() < 1e-6);
        }
    }

    #[test]
    fn dc_ramp_rho_and_exact_zero_omega() {
        // u(t) = u0 (1 + 0.1 t), real: rho(t) = 0.1/(1 + 0.1 t), omega = 0
        // bit-exactly because theta is identically zero.
        let dt = 1e-3;
        let n = 2000;
        let samples: Vec<_> =
            (0..n).map(|k| Complex64::new(0.7 * (1.0 + 0.1 * k as f64 * dt), 0.0)).collect();
        let est = estimate_cf(&ComplexSignal::new(dt, samples), EPS_MAG).unwrap();
        for (k, s) in est.iter().enumerate() {
            let t = k as f64 * dt;
            assert!((s.cf.rho - 0.1 / (1.0 + 0.1 * t)).abs() < 1e-8, "sample {k}");
            assert_eq!(s.cf.omega, 0.0, "omega must be exactly zero on a real signal");
        }
    }

    #[test]
    fn negative_real_signal_has_zero_omega() {
        let samples = vec![Complex64::new(-1.0, 0.0); 50];
        let est = estimate_cf(&ComplexSignal::new(1e-3, samples), EPS_MAG).unwrap();
        for s in est {
            assert_eq!(s.cf.omega, 0.0);
            assert_eq!(s.cf.rho, 0.0);
        }
    }

    #[test]
    fn second_order_convergence() {
        // Nonlinear CF: u = exp(sin t + j(3 t + 0.5 sin 2t)). Halving dt must
        // reduce the max interior error by >= 3.9x.
        let gen = |dt: f64, n: usize| {
            let samples = (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    Complex64::new(t.sin(), 3.0 * t + 0.5 * (2.0 * t).sin()).exp()
                })
                .collect();
            ComplexSignal::new(dt, samples)
        };
        let err = |dt: f64, n: usize| {
            let sig = gen(dt, n);
            let est = estimate_cf(&sig, EPS_MAG).unwrap();
            let mut worst = 0.0_f64;
            for (k, s) in est.iter().enumerate().skip(1).take(n - 2) {
                let t = k as f64 * dt;
                let rho = t.cos();
                let omega = 3.0 + (2.0 * t).cos();
                worst = worst.max((s.cf.rho - rho).abs().max((s.cf.omega - omega).abs()));
            }
            worst
        };
        let e1 = err(2e-3, 501);
        let e2 = err(1e-3, 1001);
        assert!(e1 / e2 >= 3.9, "convergence ratio {} too low", e1 / e2);
    }

    #[test]
    fn magnitude_dip_is_flagged_not_fabricated() {
        let mut samples = vec![Complex64::new(1.0, 0.0); 20];
        samples[10] = Complex64::new(1e-12, 0.0);
        let est = estimate_cf(&ComplexSignal::new(1e-3, samples), EPS_MAG).unwrap();
        // The dipped sample is flagged with NaN, never interpolated over.
        assert!(est[10].singular);
        assert!(est[10].cf.rho.is_nan() && est[10].cf.omega.is_nan());
        // Its neighbors fall back to one-sided stencils inside the clean
        // runs, so they stay computable and exact here.
        for i in [0, 5, 9, 11, 19] {
            assert!(!est[i].singular, "sample {i} should be clean");
            assert_eq!(est[i].cf.rho, 0.0);
            assert_eq!(est[i].cf.omega, 0.0);
        }
    }

    #[test]
    fn aliasing_is_an_error() {
        // omega * dt = pi rotates each step onto the sign-ambiguity
        // boundary, the one aliasing case that is detectable at all.
        let w = PI / 1e-3;
        let sig = exp_signal(Complex64::new(0.0, w), Complex64::new(1.0, 0.0), 1e-3, 10);
        match estimate_cf(&sig, EPS_MAG) {
            Err(CfError::UnwrapAliasing { .. }) => {}
            other => panic!("expected UnwrapAliasing, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples() {
        let sig = ComplexSignal::new(1e-3, vec![Complex64::new(1.0, 0.0); 2]);
        assert!(matches!(estimate_cf(&sig, EPS_MAG), Err(CfError::TooFewSamples(2))));
    }

    #[test]
    fn sampled_derivative_matches_polynomial() {
        // Exact for quadratics by construction.
        let dt = 0.1;
        let samples: Vec<_> = (0..10)
            .map(|k| {
                let t = k as f64 * dt;
                Complex64::new(1.0 + 2.0 * t + 3.0 * t * t, -t * t)
            })
            .collect();
        let d = sampled_derivative(&samples, dt);
        for (k, v) in d.iter().enumerate() {
            let t = k as f64 * dt;
            assert_relative_eq!(v.re, 2.0 + 6.0 * t, max_relative = 1e-10);
            assert_relative_eq!(v.im, -2.0 * t, epsilon = 1e-10);
        }
    }
}
