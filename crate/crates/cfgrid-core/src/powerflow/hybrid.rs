//! General power flow over mixed AC/DC cases.
//!
//! One square nonlinear system covers every bus balance and every converter
//! control target; the Jacobian comes from forward differences, so adding a
//! device or control mode never requires new derivative code. Cases are
//! small enough that the dense factorization is irrelevant next to the
//! admittance reassembly each converter iterate forces anyway.

use super::{
    scheduled_device_power, ConverterSetpoint, PfError, PfOptions, PfSolution,
};
use crate::branches::{
    converter_admittance_block, steady_branch_states, BranchCfState, ConverterOperatingPoint,
};
use crate::network::{
    assemble_admittance, BusKind, DMode, DeviceModel, ElementKind, MachinePf, NetworkCase, QMode,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::BTreeMap;

#[derive(Clone, Copy)]
enum Unknown {
    AcTheta(usize),
    AcVm(usize),
    DcV(usize),
    ConvM(usize),
    ConvAlpha(usize),
}

struct Layout {
    unknowns: Vec<Unknown>,
    /// Fixed voltage template; unknown entries get overwritten per iterate.
    vm0: Vec<f64>,
    va0: Vec<f64>,
    /// PV machine P setpoints per bus.
    p_gen: Vec<f64>,
    /// Buses owning P residuals / Q residuals.
    p_buses: Vec<usize>,
    q_buses: Vec<usize>,
    converters: Vec<usize>,
}

fn layout(case: &NetworkCase) -> Layout {
    let n = case.n_buses();
    let mut vm0: Vec<f64> = case.buses.iter().map(|b| b.v0).collect();
    let va0: Vec<f64> = case.buses.iter().map(|b| b.theta0).collect();
    let mut p_gen = vec![0.0; n];

    #[derive(Clone, Copy, PartialEq)]
    enum Class {
        AcSlack,
        AcPv,
        AcPq,
        DcFixed,
        DcFree,
    }
    let mut class: Vec<Class> = case
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Ac { Class::AcPq } else { Class::DcFree })
        .collect();
    for d in &case.devices {
        match &d.model {
            DeviceModel::Machine(m) => match m.pf {
                MachinePf::Slack { v_set } => {
                    class[d.bus] = Class::AcSlack;
                    vm0[d.bus] = v_set;
                }
                MachinePf::Pv { p_set, v_set } => {
                    class[d.bus] = Class::AcPv;
                    vm0[d.bus] = v_set;
                    p_gen[d.bus] += p_set;
                }
            },
            DeviceModel::DcVoltageSource { v_ref, .. } => {
                class[d.bus] = Class::DcFixed;
                vm0[d.bus] = *v_ref;
            }
            _ => {}
        }
    }

    let mut unknowns = Vec::new();
    let mut p_buses = Vec::new();
    let mut q_buses = Vec::new();
    for h in 0..n {
        match class[h] {
            Class::AcSlack | Class::DcFixed => {}
            Class::AcPv => {
                unknowns.push(Unknown::AcTheta(h));
                p_buses.push(h);
            }
            Class::AcPq => {
                unknowns.push(Unknown::AcTheta(h));
                unknowns.push(Unknown::AcVm(h));
                p_buses.push(h);
                q_buses.push(h);
            }
            Class::DcFree => {
                unknowns.push(Unknown::DcV(h));
                p_buses.push(h);
            }
        }
    }
    let converters = case.converters();
    for &e in &converters {
        unknowns.push(Unknown::ConvM(e));
        unknowns.push(Unknown::ConvAlpha(e));
    }
    Layout { unknowns, vm0, va0, p_gen, p_buses, q_buses, converters }
}

struct Eval<'a> {
    case: &'a NetworkCase,
    lay: &'a Layout,
}

impl Eval<'_> {
    fn voltages(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut vm = self.lay.vm0.clone();
        let mut va = self.lay.va0.clone();
        for (i, u) in self.lay.unknowns.iter().enumerate() {
            match *u {
                Unknown::AcTheta(h) => va[h] = x[i],
                Unknown::AcVm(h) | Unknown::DcV(h) => vm[h] = x[i],
                _ => {}
            }
        }
        (vm, va)
    }

    fn converter_values(&self, x: &DVector<f64>) -> BTreeMap<usize, ConverterSetpoint> {
        let mut out = BTreeMap::new();
        for (i, u) in self.lay.unknowns.iter().enumerate() {
            match *u {
                Unknown::ConvM(e) => {
                    out.entry(e).or_insert(ConverterSetpoint { m: 1.0, alpha: 0.0 }).m = x[i]
                }
                Unknown::ConvAlpha(e) => {
                    out.entry(e).or_insert(ConverterSetpoint { m: 1.0, alpha: 0.0 }).alpha = x[i]
                }
                _ => {}
            }
        }
        out
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let case = self.case;
        let (vm, va) = self.voltages(x);
        let v: Vec<Complex64> =
            (0..case.n_buses()).map(|h| Complex64::from_polar(vm[h], va[h])).collect();
        let conv = self.converter_values(x);

        let mut states = steady_branch_states(case);
        for (&e, sp) in &conv {
            let elem = &case.elements[e];
            let ElementKind::Converter { y, .. } = &elem.kind else { unreachable!() };
            let to = elem.to.bus().expect("converter DC terminal");
            let op = ConverterOperatingPoint::stationary(
                sp.m,
                sp.alpha,
                va[elem.from],
                vm[elem.from],
                vm[to],
                case.omega_nom,
            );
            states.dynamic.insert(elem.id.clone(), BranchCfState::converter(*y, &op));
        }
        let ybus = assemble_admittance(case, &states).expect("all dynamic states supplied");
        let i_branch = ybus.mul_vec(&v);
        let s_sched = scheduled_device_power(case, &v);

        let nres = self.lay.unknowns.len();
        let mut f = DVector::zeros(nres);
        let mut r = 0;
        for &h in &self.lay.p_buses {
            let s = v[h] * i_branch[h].conj() + s_sched[h];
            f[r] = s.re + self.lay.p_gen[h];
            r += 1;
        }
        for &h in &self.lay.q_buses {
            let s = v[h] * i_branch[h].conj() + s_sched[h];
            f[r] = s.im;
            r += 1;
        }
        for &e in &self.lay.converters {
            let elem = &case.elements[e];
            let ElementKind::Converter { y, control } = &elem.kind else { unreachable!() };
            let sp = conv[&e];
            let to = elem.to.bus().unwrap();
            let op = ConverterOperatingPoint::stationary(
                sp.m,
                sp.alpha,
                va[elem.from],
                vm[elem.from],
                vm[to],
                case.omega_nom,
            );
            let blk = converter_admittance_block(*y, &op);
            let s_ac = v[elem.from] * (blk.ff * v[elem.from] + blk.ft * v[to]).conj();
            f[r] = match control.d_mode {
                DMode::VDc => vm[to] - control.v_dc_ref,
                // At nominal frequency both frequency modes sit on the
                // scheduled power.
                DMode::FAc | DMode::PAc => s_ac.re - control.p_sched,
            };
            f[r + 1] = match control.q_mode {
                QMode::VAc => vm[elem.from] - control.v_ac_ref.unwrap(),
                QMode::QAc => s_ac.im - control.q_sched,
            };
            r += 2;
        }
        debug_assert_eq!(r, nres);
        f
    }
}

/// Solves any valid case: AC islands, DC islands, and the converters that
/// couple them.
pub fn solve(case: &NetworkCase, opts: &PfOptions) -> Result<PfSolution, PfError> {
    let lay = layout(case);
    let eval = Eval { case, lay: &lay };
    let n_unknowns = lay.unknowns.len();

    let mut x = DVector::zeros(n_unknowns);
    for (i, u) in lay.unknowns.iter().enumerate() {
        x[i] = match *u {
            Unknown::AcTheta(h) => lay.va0[h],
            Unknown::AcVm(h) | Unknown::DcV(h) => lay.vm0[h],
            Unknown::ConvM(e) => {
                let elem = &case.elements[e];
                let to = elem.to.bus().unwrap();
                lay.vm0[elem.from] / lay.vm0[to]
            }
            Unknown::ConvAlpha(_) => 0.0,
        };
    }

    if n_unknowns == 0 {
        return Ok(PfSolution {
            v: (0..case.n_buses())
                .map(|h| Complex64::from_polar(lay.vm0[h], lay.va0[h]))
                .collect(),
            converters: BTreeMap::new(),
            iterations: 0,
        });
    }

    let mut f = eval.residual(&x);
    for it in 0..opts.max_iter {
        let fnorm = f.amax();
        if fnorm < opts.tol {
            return finish(case, &eval, &x, it);
        }

        let mut jac = DMatrix::zeros(n_unknowns, n_unknowns);
        for j in 0..n_unknowns {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += h;
            let fp = eval.residual(&xp);
            for i in 0..n_unknowns {
                jac[(i, j)] = (fp[i] - f[i]) / h;
            }
        }
        let lu = jac.lu();
        let dx = lu.solve(&f).ok_or(PfError::Singular(it))?;

        // Backtracking keeps distant starts from overshooting.
        let mut lambda = 1.0;
        loop {
            let xn = &x - lambda * &dx;
            let fn_ = eval.residual(&xn);
            if fn_.amax() <= (1.0 - 1e-4 * lambda) * fnorm || lambda < 1.0 / 64.0 {
                x = xn;
                f = fn_;
                break;
            }
            lambda *= 0.5;
        }
    }

    Err(PfError::NotConverged { iterations: opts.max_iter, residual: f.amax() })
}

fn finish(
    case: &NetworkCase,
    eval: &Eval,
    x: &DVector<f64>,
    iterations: usize,
) -> Result<PfSolution, PfError> {
    let (vm, va) = eval.voltages(x);
    let conv = eval.converter_values(x);
    let mut converters = BTreeMap::new();
    for (&e, sp) in &conv {
        let elem = &case.elements[e];
        let ElementKind::Converter { control, .. } = &elem.kind else { unreachable!() };
        if sp.m < control.m_min || sp.m > control.m_max {
            return Err(PfError::OverModulation {
                element: elem.id.clone(),
                m: sp.m,
                m_min: control.m_min,
                m_max: control.m_max,
            });
        }
        converters.insert(elem.id.clone(), *sp);
    }
    Ok(PfSolution {
        v: (0..case.n_buses()).map(|h| Complex64::from_polar(vm[h], va[h])).collect(),
        converters,
        iterations,
    })
}
