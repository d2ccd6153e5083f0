//! Two-axis synchronous machine with an optional first-order governor and
//! AVR. Angles are measured against the synchronously rotating network
//! frame, so a machine at nominal speed has a constant rotor angle and the
//! whole steady state is an equilibrium of the equations here.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;

use crate::network::MachineParams;

/// Network phasor into the rotor frame: d axis on the real part, q axis on
/// the imaginary part.
pub fn to_dq(u: Complex64, delta: f64) -> Complex64 {
    u * Complex64::new(0.0, -(delta - FRAC_PI_2)).exp()
}

pub fn from_dq(u_dq: Complex64, delta: f64) -> Complex64 {
    u_dq * Complex64::new(0.0, delta - FRAC_PI_2).exp()
}

/// Steady operating state derived from a power-flow result. `p_ref` is the
/// governor reference, `ef0` the field voltage, `v_ref` the AVR reference
/// that reproduces `ef0` at the power-flow terminal voltage.
#[derive(Debug, Clone)]
pub struct MachineInit {
    pub delta: f64,
    pub eq1: f64,
    pub ed1: f64,
    pub p_ref: f64,
    pub ef0: f64,
    pub v_ref: f64,
}

/// Initialize from the terminal voltage and the complex power the machine
/// injects there. The rotor position comes from the voltage behind the
/// q-axis synchronous impedance.
pub fn init(p: &MachineParams, v: Complex64, s: Complex64) -> MachineInit {
    let i = (s / v).conj();
    let e = v + Complex64::new(p.ra, p.xq) * i;
    let delta = e.arg();
    let vdq = to_dq(v, delta);
    let idq = to_dq(i, delta);
    let (vd, vq) = (vdq.re, vdq.im);
    let (id, iq) = (idq.re, idq.im);
    let eq1 = vq + p.ra * iq + p.xd1 * id;
    let ed1 = vd + p.ra * id - p.xq1 * iq;
    let ef0 = eq1 + (p.xd - p.xd1) * id;
    let pe = ed1 * id + eq1 * iq + (p.xq1 - p.xd1) * id * iq;
    let v_ref = match &p.avr {
        Some(avr) => v.norm() + ef0 / avr.ka,
        None => v.norm(),
    };
    MachineInit { delta, eq1, ed1, p_ref: pe, ef0, v_ref }
}

/// One evaluation of the machine equations: stator current injected into
/// the bus plus the rate of every differential state. Rates for absent
/// governor or AVR states are zero.
#[derive(Debug, Clone)]
pub struct MachineRhs {
    pub i_inj: Complex64,
    pub pe: f64,
    pub d_delta: f64,
    pub d_domega: f64,
    pub d_eq1: f64,
    pub d_ed1: f64,
    pub d_pg: f64,
    pub d_ef: f64,
}

/// `domega` is the speed deviation in pu; `pg` and `ef` are ignored when
/// the corresponding controller is absent. `p_shift` moves the governor
/// reference (secondary control); without a governor it moves the
/// mechanical power directly.
#[allow(clippy::too_many_arguments)]
pub fn rhs(
    p: &MachineParams,
    init: &MachineInit,
    omega_nom: f64,
    delta: f64,
    domega: f64,
    eq1: f64,
    ed1: f64,
    pg: f64,
    ef: f64,
    v: Complex64,
    p_shift: f64,
) -> MachineRhs {
    let vdq = to_dq(v, delta);
    let (vd, vq) = (vdq.re, vdq.im);
    // Stator algebra: [ra, -xq1; xd1, ra] [id; iq] = [ed1 - vd; eq1 - vq].
    let a = ed1 - vd;
    let b = eq1 - vq;
    let det = p.ra * p.ra + p.xd1 * p.xq1;
    let id = (p.ra * a + p.xq1 * b) / det;
    let iq = (p.ra * b - p.xd1 * a) / det;
    let pe = ed1 * id + eq1 * iq + (p.xq1 - p.xd1) * id * iq;
    let pm = match &p.governor {
        Some(_) => pg,
        None => init.p_ref + p_shift,
    };
    let efd = if p.avr.is_some() { ef } else { init.ef0 };
    let d_pg = match &p.governor {
        Some(g) => (init.p_ref + p_shift - domega / g.r_droop - pg) / g.t_g,
        None => 0.0,
    };
    let d_ef = match &p.avr {
        Some(a) => (a.ka * (init.v_ref - v.norm()) - ef) / a.ta,
        None => 0.0,
    };
    MachineRhs {
        i_inj: from_dq(Complex64::new(id, iq), delta),
        pe,
        d_delta: omega_nom * domega,
        d_domega: (pm - pe - p.d * domega) / (2.0 * p.h),
        d_eq1: (-eq1 - (p.xd - p.xd1) * id + efd) / p.td01,
        d_ed1: (-ed1 + (p.xq - p.xq1) * iq) / p.tq01,
        d_pg,
        d_ef,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AvrParams, GovernorParams, MachinePf};
    use approx::assert_relative_eq;

    fn params() -> MachineParams {
        MachineParams {
            h: 3.5,
            d: 1.0,
            xd: 1.8,
            xq: 1.7,
            xd1: 0.3,
            xq1: 0.55,
            td01: 8.0,
            tq01: 0.4,
            ra: 0.0025,
            pf: MachinePf::Slack { v_set: 1.0 },
            governor: Some(GovernorParams { r_droop: 0.05, t_g: 0.5 }),
            avr: Some(AvrParams { ka: 200.0, ta: 0.02 }),
            area: "a".into(),
        }
    }

    #[test]
    fn dq_rotation_round_trips() {
        let u = Complex64::new(0.93, -0.41);
        for &delta in &[0.0, 0.37, -1.2, 2.9] {
            let back = from_dq(to_dq(u, delta), delta);
            assert!((back - u).norm() < 1e-15);
        }
    }

    #[test]
    fn init_is_an_equilibrium() {
        let p = params();
        let v = Complex64::from_polar(1.02, 0.21);
        let s = Complex64::new(0.85, 0.31);
        let ini = init(&p, v, s);
        let r = rhs(
            &p,
            &ini,
            2.0 * std::f64::consts::PI * 60.0,
            ini.delta,
            0.0,
            ini.eq1,
            ini.ed1,
            ini.p_ref,
            ini.ef0,
            v,
            0.0,
        );
        // The stator solve must give back the power-flow current.
        let i_pf = (s / v).conj();
        assert!((r.i_inj - i_pf).norm() < 1e-12);
        for d in [r.d_delta, r.d_domega, r.d_eq1, r.d_ed1, r.d_pg, r.d_ef] {
            assert!(d.abs() < 1e-12, "rate {d:.3e} not stationary");
        }
        // Transient q-axis EMF on the d axis reduces to (xq - xq1) iq.
        let idq = to_dq(i_pf, ini.delta);
        assert_relative_eq!(ini.ed1, (p.xq - p.xq1) * idq.im, max_relative = 1e-12);
    }

    #[test]
    fn power_step_accelerates_at_expected_rate() {
        // Without a governor p_shift acts on the shaft directly, so the
        // initial acceleration is the imbalance over 2H.
        let mut p = params();
        p.governor = None;
        p.d = 0.0;
        let v = Complex64::from_polar(1.0, 0.0);
        let s = Complex64::new(0.6, 0.1);
        let ini = init(&p, v, s);
        let r = rhs(
            &p,
            &ini,
            2.0 * std::f64::consts::PI * 60.0,
            ini.delta,
            0.0,
            ini.eq1,
            ini.ed1,
            0.0,
            ini.ef0,
            v,
            0.1,
        );
        assert_relative_eq!(r.d_domega, 0.1 / (2.0 * p.h), max_relative = 1e-12);
    }

    #[test]
    fn governor_reacts_against_speed() {
        let p = params();
        let v = Complex64::from_polar(1.0, 0.0);
        let ini = init(&p, v, Complex64::new(0.5, 0.0));
        // Machine running fast: governor reference drops below pg.
        let r = rhs(
            &p,
            &ini,
            2.0 * std::f64::consts::PI * 60.0,
            ini.delta,
            0.01,
            ini.eq1,
            ini.ed1,
            ini.p_ref,
            ini.ef0,
            v,
            0.0,
        );
        let expect = (-0.01 / 0.05) / 0.5;
        assert_relative_eq!(r.d_pg, expect, max_relative = 1e-12);
        // And the AVR pushes the field up when the voltage sags.
        let low = rhs(
            &p,
            &ini,
            2.0 * std::f64::consts::PI * 60.0,
            ini.delta,
            0.0,
            ini.eq1,
            ini.ed1,
            ini.p_ref,
            ini.ef0,
            v * 0.95,
            0.0,
        );
        assert!(low.d_ef > 0.0);
    }
}
