//! Averaged converter control. Two PI channels: the d channel steers the
//! phase angle (active power, island frequency or DC voltage), the q
//! channel steers the modulation command (AC voltage magnitude or reactive
//! power). Both pass through a first-order actuator. The modulation itself
//! divides the command by the instantaneous DC voltage, which decouples
//! the AC-side EMF from DC-side swings until a limit engages.

use crate::network::{ConverterControl, DMode, QMode};

/// Quantities the loops observe at one instant. `p_ac`/`q_ac` are the
/// converter's injection into its AC bus; `f_coi` is the inertial
/// frequency of that AC island in pu.
#[derive(Debug, Clone, Copy)]
pub struct Measurements {
    pub v_ac_mag: f64,
    pub v_dc: f64,
    pub p_ac: f64,
    pub q_ac: f64,
    pub f_coi: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ControlRates {
    pub d_zd: f64,
    pub d_zq: f64,
    pub d_vcmd: f64,
    pub d_alpha: f64,
}

/// Modulation ratio actually applied: commanded EMF over DC voltage, hard
/// limited.
pub fn modulation(ctl: &ConverterControl, v_cmd: f64, v_dc: f64) -> f64 {
    (v_cmd / v_dc).clamp(ctl.m_min, ctl.m_max)
}

/// True when the command sits outside the modulation limits, in which case
/// the applied ratio stops tracking the command.
pub fn clamped(ctl: &ConverterControl, v_cmd: f64, v_dc: f64) -> bool {
    let raw = v_cmd / v_dc;
    raw < ctl.m_min || raw > ctl.m_max
}

/// Control-state rates. A positive angle error drives more power into the
/// AC side, so every d-mode error is written so that "too high" measures
/// positive and raises alpha only when that counteracts the deviation.
pub fn control_rhs(
    ctl: &ConverterControl,
    zd: f64,
    zq: f64,
    vcmd: f64,
    alpha: f64,
    meas: &Measurements,
) -> ControlRates {
    let e_d = match ctl.d_mode {
        // DC voltage above target: push power out to the AC side.
        DMode::VDc => meas.v_dc - ctl.v_dc_ref,
        // Injection short of schedule: advance the angle.
        DMode::PAc => ctl.p_sched - meas.p_ac,
        // Island slow: feed it.
        DMode::FAc => ctl.f_ref - meas.f_coi,
    };
    let e_q = match ctl.q_mode {
        QMode::VAc => ctl.v_ac_ref.unwrap_or(meas.v_ac_mag) - meas.v_ac_mag,
        QMode::QAc => ctl.q_sched - meas.q_ac,
    };
    ControlRates {
        d_zd: ctl.ki_d * e_d,
        d_zq: ctl.ki_q * e_q,
        d_vcmd: (zq + ctl.kp_q * e_q - vcmd) / ctl.t_actuator,
        d_alpha: (zd + ctl.kp_d * e_d - alpha) / ctl.t_actuator,
    }
}
