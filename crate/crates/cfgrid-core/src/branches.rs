//! Instantaneous admittance and admittance complex frequency of dynamic
//! branch elements.
//!
//! Each dynamic element has, at any instant, an admittance `Y(t)` linking
//! its terminal voltages to its terminal currents and a complex frequency
//! `chi = dY/dt / Y` describing how fast that admittance moves. For
//! two-port elements (transformers, converters) both come as 2x2 blocks and
//! `chi` is defined entry-wise.
//!
//! Closed forms, with `eta` the voltage CF at a terminal and `xi` the branch
//! current CF, both in rad/s:
//!
//! ```text
//!   series RL:   Y = 1 / (R + L xi)          chi = -L xi_dot / (R + L xi)
//!   shunt GC:    Y = G + C eta               chi =  C eta_dot / (G + C eta)
//! ```
//!
//! A `chi` denominator hitting zero is a genuine singularity of the model
//! (the admittance itself vanishes or diverges); those values are reported
//! as [`CfValue::Singular`], never fabricated.

use crate::cf::EPS_SING;
use crate::network::{BranchStates, ElementKind, NetworkCase};
use num_complex::Complex64;

/// 2x2 admittance block of a two-port element, in the crate sign convention
/// (`ff`/`tt` on the diagonal of the bus matrix, `ft`/`tf` off it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block2 {
    pub ff: Complex64,
    pub ft: Complex64,
    pub tf: Complex64,
    pub tt: Complex64,
}

impl Block2 {
    /// Block of a plain two-terminal admittance: `-y` on the diagonal,
    /// `+y` off it. Used with a ground terminal only the `ff` entry lands.
    pub fn symmetric(y: Complex64) -> Self {
        Self { ff: -y, ft: y, tf: y, tt: -y }
    }

    pub fn zero() -> Self {
        let z = Complex64::new(0.0, 0.0);
        Self { ff: z, ft: z, tf: z, tt: z }
    }
}

/// A CF value that may sit on a model singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CfValue {
    Finite(Complex64),
    Singular,
}

impl CfValue {
    pub fn finite(self) -> Option<Complex64> {
        match self {
            CfValue::Finite(v) => Some(v),
            CfValue::Singular => None,
        }
    }

    pub fn zero() -> Self {
        CfValue::Finite(Complex64::new(0.0, 0.0))
    }
}

/// Entry-wise CF of a two-port admittance block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiBlock2 {
    pub ff: CfValue,
    pub ft: CfValue,
    pub tf: CfValue,
    pub tt: CfValue,
}

/// Instantaneous admittance of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum YNow {
    Scalar(Complex64),
    Block(Block2),
}

/// Instantaneous admittance CF of one element, same shape as its `YNow`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChiNow {
    Scalar(CfValue),
    Block(ChiBlock2),
}

/// Admittance state of one dynamic element at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchCfState {
    pub y: YNow,
    pub chi: ChiNow,
}

pub fn rl_admittance(r: f64, l: f64, xi: Complex64) -> Complex64 {
    (Complex64::new(r, 0.0) + l * xi).inv()
}

pub fn chi_rl(r: f64, l: f64, xi: Complex64, xi_dot: Complex64) -> CfValue {
    let denom = Complex64::new(r, 0.0) + l * xi;
    if denom.norm() <= EPS_SING {
        CfValue::Singular
    } else {
        CfValue::Finite(-l * xi_dot / denom)
    }
}

pub fn gc_admittance(g: f64, c: f64, eta: Complex64) -> Complex64 {
    Complex64::new(g, 0.0) + c * eta
}

pub fn chi_gc(g: f64, c: f64, eta: Complex64, eta_dot: Complex64) -> CfValue {
    let denom = Complex64::new(g, 0.0) + c * eta;
    if denom.norm() <= EPS_SING {
        CfValue::Singular
    } else {
        CfValue::Finite(c * eta_dot / denom)
    }
}

/// Instantaneous resistance a DC series RL element presents, `R + L i'/i`.
/// Undefined while the current crosses zero.
pub fn equivalent_resistance(r: f64, l: f64, i: f64, di_dt: f64) -> Option<f64> {
    if i.abs() <= EPS_SING {
        None
    } else {
        Some(r + l * di_dt / i)
    }
}

/// Regulating transformer block. `from` is the unit-ratio side, `to` the
/// side scaled by `m exp(j alpha)`; `y_t` is the series admittance seen
/// from the unit side.
pub fn transformer_admittance_block(y_t: Complex64, m: f64, alpha: f64) -> Block2 {
    let a = m * Complex64::new(0.0, alpha).exp();
    Block2 { ff: -y_t, ft: a * y_t, tf: a.conj() * y_t, tt: -(m * m) * y_t }
}

/// Entry-wise CF of the transformer block. The unit-side diagonal is
/// constant, the tap-side diagonal moves at twice the ratio rate, and the
/// off-diagonals pick up the phase-shift rate with opposite signs.
pub fn transformer_chi_block(m: f64, m_dot: f64, alpha_dot: f64) -> ChiBlock2 {
    let mm = m_dot / m;
    ChiBlock2 {
        ff: CfValue::zero(),
        ft: CfValue::Finite(Complex64::new(mm, alpha_dot)),
        tf: CfValue::Finite(Complex64::new(mm, -alpha_dot)),
        tt: CfValue::Finite(Complex64::new(2.0 * mm, 0.0)),
    }
}

/// Operating point of an averaged two-level converter: modulation `m`,
/// firing angle `alpha` (rad, relative to the AC bus phase `theta_ac`),
/// terminal voltage magnitudes, and their rates. `eta_ac` is the AC bus
/// voltage CF (rad/s); the DC bus CF is real, `rho_dc`.
#[derive(Debug, Clone, Copy)]
pub struct ConverterOperatingPoint {
    pub m: f64,
    pub alpha: f64,
    pub theta_ac: f64,
    pub v_ac: f64,
    pub v_dc: f64,
    pub m_dot: f64,
    pub alpha_dot: f64,
    pub eta_ac: Complex64,
    pub rho_dc: f64,
}

impl ConverterOperatingPoint {
    /// Stationary point: rates zero, AC side rotating at `omega` rad/s.
    pub fn stationary(m: f64, alpha: f64, theta_ac: f64, v_ac: f64, v_dc: f64, omega: f64) -> Self {
        Self {
            m,
            alpha,
            theta_ac,
            v_ac,
            v_dc,
            m_dot: 0.0,
            alpha_dot: 0.0,
            eta_ac: Complex64::new(0.0, omega),
            rho_dc: 0.0,
        }
    }
}

/// Averaged converter block. `from` is the AC bus (complex voltage), `to`
/// the DC bus (real voltage). The AC row reproduces the phase reactor
/// equation `i_ac = y (v_t - v_ac)` with internal voltage
/// `v_t = m v_dc exp(j(alpha + theta_ac))`; the DC row injects the power
/// that crosses the lossless valve, divided by `v_dc`, and is real for any
/// operating point by construction.
pub fn converter_admittance_block(y: Complex64, op: &ConverterOperatingPoint) -> Block2 {
    let (g, b) = (y.re, y.im);
    let phase = Complex64::new(0.0, op.alpha + op.theta_ac).exp();
    let (sin_a, cos_a) = op.alpha.sin_cos();
    let tt = Complex64::new(
        -op.m * op.m * g,
        op.m * (op.v_ac / op.v_dc) * (g * sin_a - b * cos_a),
    );
    Block2 { ff: -y, ft: op.m * phase * y, tf: op.m * phase.conj() * y, tt }
}

/// Entry-wise CF of the converter block.
///
/// The AC diagonal is constant. The off-diagonals follow the modulation
/// ratio and total phase, mirrored across the diagonal like the
/// transformer. The DC diagonal is a two-term admittance (real loss part
/// and imaginary transfer part); its CF is the Y-weighted mix of the two
/// term CFs, kept in product form so the only guard needed is on the total
/// `Y_tt` itself.
pub fn converter_chi_block(y: Complex64, op: &ConverterOperatingPoint) -> ChiBlock2 {
    let (g, b) = (y.re, y.im);
    let mm = op.m_dot / op.m;
    let omega_ac = op.eta_ac.im;
    let rho_ac = op.eta_ac.re;
    let off = Complex64::new(mm, op.alpha_dot + omega_ac);

    let (sin_a, cos_a) = op.alpha.sin_cos();
    let y1 = Complex64::new(-op.m * op.m * g, 0.0);
    let y2 = Complex64::new(0.0, op.m * (op.v_ac / op.v_dc) * (g * sin_a - b * cos_a));
    let y_tt = y1 + y2;
    let tt = if y_tt.norm() <= EPS_SING {
        CfValue::Singular
    } else {
        // y1 chi1 with chi1 = 2 m_dot/m; y2 chi2 expanded so the transfer
        // term never divides by (g sin - b cos), which crosses zero at
        // ordinary operating points.
        let y1c1 = y1 * (2.0 * mm);
        let y2c2 = Complex64::new(0.0, op.m * (op.v_ac / op.v_dc))
            * ((g * sin_a - b * cos_a) * (mm + rho_ac - op.rho_dc)
                + op.alpha_dot * (g * cos_a + b * sin_a));
        CfValue::Finite((y1c1 + y2c2) / y_tt)
    };

    ChiBlock2 {
        ff: CfValue::zero(),
        ft: CfValue::Finite(off),
        tf: CfValue::Finite(off.conj()),
        tt,
    }
}

impl BranchCfState {
    pub fn series_rl(r: f64, l: f64, xi: Complex64, xi_dot: Complex64) -> Self {
        Self {
            y: YNow::Scalar(rl_admittance(r, l, xi)),
            chi: ChiNow::Scalar(chi_rl(r, l, xi, xi_dot)),
        }
    }

    pub fn shunt_gc(g: f64, c: f64, eta: Complex64, eta_dot: Complex64) -> Self {
        Self {
            y: YNow::Scalar(gc_admittance(g, c, eta)),
            chi: ChiNow::Scalar(chi_gc(g, c, eta, eta_dot)),
        }
    }

    pub fn transformer(y_t: Complex64, m: f64, alpha: f64, m_dot: f64, alpha_dot: f64) -> Self {
        Self {
            y: YNow::Block(transformer_admittance_block(y_t, m, alpha)),
            chi: ChiNow::Block(transformer_chi_block(m, m_dot, alpha_dot)),
        }
    }

    pub fn converter(y: Complex64, op: &ConverterOperatingPoint) -> Self {
        Self {
            y: YNow::Block(converter_admittance_block(y, op)),
            chi: ChiNow::Block(converter_chi_block(y, op)),
        }
    }
}

/// States of all dynamic elements at an undisturbed stationary point:
/// DC currents and voltage CFs are zero, transformers sit at their set
/// ratio. Converter entries are not filled in; their stationary point
/// depends on the power flow solution, so callers supply those.
pub fn steady_branch_states(case: &NetworkCase) -> BranchStates {
    let zero = Complex64::new(0.0, 0.0);
    let mut states = BranchStates::default();
    for e in &case.elements {
        let st = match &e.kind {
            ElementKind::StaticY { .. } | ElementKind::Converter { .. } => continue,
            ElementKind::SeriesRl { r, l } => BranchCfState::series_rl(*r, *l, zero, zero),
            ElementKind::ShuntGc { g, c } => BranchCfState::shunt_gc(*g, *c, zero, zero),
            ElementKind::Transformer { y_t, m0, alpha0, .. } => {
                BranchCfState::transformer(*y_t, *m0, *alpha0, 0.0, 0.0)
            }
        };
        states.dynamic.insert(e.id.clone(), st);
    }
    states
}
