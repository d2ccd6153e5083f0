//! Steady-state solution of the mixed AC/DC network.
//!
//! Two solvers share one solution type: [`solve`] handles any valid case by
//! Newton iteration on the full set of bus and converter equations with a
//! finite-difference Jacobian, and [`solve_ac`] is the classic polar
//! Newton-Raphson with an analytic Jacobian for purely AC cases. On AC-only
//! cases the two agree to solver tolerance, which the tests pin down.
//!
//! Conventions: everything per-unit on the system base. Converter setpoints
//! solve to a modulation ratio `m` and firing angle `alpha` such that each
//! converter meets its control targets at nominal frequency; DC voltage
//! sources fix their bus voltage and absorb the island's power balance, as
//! the slack machine does for its AC island.

mod ac;
mod hybrid;

pub use ac::solve_ac;
pub use hybrid::solve;

use crate::branches::{BranchCfState, ConverterOperatingPoint};
use crate::network::{BranchStates, BusKind, DeviceModel, ElementKind, MachinePf, NetworkCase};
use num_complex::Complex64;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    /// Infinity-norm residual tolerance, pu.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50 }
    }
}

#[derive(Debug, Error)]
pub enum PfError {
    #[error("power flow did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {0}")]
    Singular(usize),
    #[error("converter {element:?} solves to modulation {m:.4}, outside [{m_min}, {m_max}]")]
    OverModulation { element: String, m: f64, m_min: f64, m_max: f64 },
    #[error("{0}")]
    Unsupported(String),
}

/// Converter operating values produced by the power flow.
#[derive(Debug, Clone, Copy)]
pub struct ConverterSetpoint {
    pub m: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    /// Bus voltages; DC entries have zero imaginary part.
    pub v: Vec<Complex64>,
    /// Element id -> solved setpoint, one entry per converter.
    pub converters: BTreeMap<String, ConverterSetpoint>,
    pub iterations: usize,
}

/// Dynamic-element states at the solved operating point: stationary RL/GC
/// and transformer states plus converter states at the solved setpoints.
pub fn solution_branch_states(case: &NetworkCase, sol: &PfSolution) -> BranchStates {
    let mut states = crate::branches::steady_branch_states(case);
    for e in &case.elements {
        if let ElementKind::Converter { y, .. } = &e.kind {
            let sp = sol.converters[&e.id];
            let to = e.to.bus().expect("converter to-terminal is a bus");
            let op = ConverterOperatingPoint::stationary(
                sp.m,
                sp.alpha,
                sol.v[e.from].arg(),
                sol.v[e.from].norm(),
                sol.v[to].re,
                case.omega_nom,
            );
            states.dynamic.insert(e.id.clone(), BranchCfState::converter(*y, &op));
        }
    }
    states
}

/// Complex power injected at each bus by the devices whose output is fixed
/// data: loads and scheduled DC injections. Balancing devices (machines,
/// DC voltage sources) are excluded; converters live in the admittance
/// matrix.
pub fn scheduled_device_power(case: &NetworkCase, v: &[Complex64]) -> Vec<Complex64> {
    let mut s = vec![Complex64::new(0.0, 0.0); case.n_buses()];
    for d in &case.devices {
        match &d.model {
            DeviceModel::ConstPowerLoad { p, q } => s[d.bus] -= Complex64::new(*p, *q),
            DeviceModel::ConstImpedanceLoad { y } => {
                s[d.bus] -= v[d.bus].norm_sqr() * y.conj();
            }
            DeviceModel::DcPower { p } => s[d.bus] += Complex64::new(*p, 0.0),
            DeviceModel::Machine(_) | DeviceModel::DcVoltageSource { .. } => {}
        }
    }
    s
}

/// Active-power setpoints of PV machines, per bus.
pub fn pv_machine_power(case: &NetworkCase) -> Vec<f64> {
    let mut p = vec![0.0; case.n_buses()];
    for d in &case.devices {
        if let DeviceModel::Machine(m) = &d.model {
            if let MachinePf::Pv { p_set, .. } = m.pf {
                p[d.bus] += p_set;
            }
        }
    }
    p
}

/// Complex power every device injects at the solved point. Machines and DC
/// voltage sources pick up their bus balance (which is how slack power and
/// PV reactive output materialize); everything else evaluates its model.
pub fn device_injections(case: &NetworkCase, sol: &PfSolution) -> BTreeMap<String, Complex64> {
    let states = solution_branch_states(case, sol);
    let y = crate::network::assemble_admittance(case, &states)
        .expect("solution states cover all dynamic elements");
    let i_branch = y.mul_vec(&sol.v);
    let s_sched = scheduled_device_power(case, &sol.v);
    let mut out = BTreeMap::new();
    for d in &case.devices {
        let s = match &d.model {
            DeviceModel::ConstPowerLoad { p, q } => -Complex64::new(*p, *q),
            DeviceModel::ConstImpedanceLoad { y } => -sol.v[d.bus].norm_sqr() * y.conj(),
            DeviceModel::DcPower { p } => Complex64::new(*p, 0.0),
            DeviceModel::Machine(_) | DeviceModel::DcVoltageSource { .. } => {
                // Branch injection plus all devices must cancel at the bus.
                let s_branch = sol.v[d.bus] * i_branch[d.bus].conj();
                let s = -(s_branch + s_sched[d.bus]);
                if case.buses[d.bus].kind == BusKind::Dc { Complex64::new(s.re, 0.0) } else { s }
            }
        };
        out.insert(d.id.clone(), s);
    }
    out
}
