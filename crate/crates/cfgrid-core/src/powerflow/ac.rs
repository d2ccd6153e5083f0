//! Polar Newton-Raphson with analytic Jacobian, AC-only cases.

use super::{PfError, PfOptions, PfSolution};
use crate::branches::steady_branch_states;
use crate::network::{
    assemble_admittance, BusKind, DeviceModel, ElementKind, MachinePf, NetworkCase,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq)]
enum BusClass {
    Slack,
    Pv,
    Pq,
}

/// Solves a purely AC case by the textbook polar-coordinate iteration.
pub fn solve_ac(case: &NetworkCase, opts: &PfOptions) -> Result<PfSolution, PfError> {
    if case.buses.iter().any(|b| b.kind != BusKind::Ac) {
        return Err(PfError::Unsupported("analytic AC solver: case has DC buses".into()));
    }
    let n = case.n_buses();

    // Textbook admittance matrix: the negative of the crate convention,
    // with constant-impedance loads folded onto the diagonal.
    let states = steady_branch_states(case);
    debug_assert!(case
        .elements
        .iter()
        .all(|e| !matches!(e.kind, ElementKind::Converter { .. })));
    let mut y = assemble_admittance(case, &states)
        .expect("steady states cover AC dynamic elements")
        .to_dense();
    y.iter_mut().for_each(|v| *v = -*v);
    for d in &case.devices {
        if let DeviceModel::ConstImpedanceLoad { y: yl } = &d.model {
            y[(d.bus, d.bus)] += yl;
        }
    }

    let mut class = vec![BusClass::Pq; n];
    let mut vm: Vec<f64> = case.buses.iter().map(|b| b.v0).collect();
    let mut va: Vec<f64> = case.buses.iter().map(|b| b.theta0).collect();
    let mut p_spec = vec![0.0; n];
    let mut q_spec = vec![0.0; n];
    for d in &case.devices {
        match &d.model {
            DeviceModel::Machine(m) => match m.pf {
                MachinePf::Slack { v_set } => {
                    class[d.bus] = BusClass::Slack;
                    vm[d.bus] = v_set;
                }
                MachinePf::Pv { p_set, v_set } => {
                    class[d.bus] = BusClass::Pv;
                    vm[d.bus] = v_set;
                    p_spec[d.bus] += p_set;
                }
            },
            DeviceModel::ConstPowerLoad { p, q } => {
                p_spec[d.bus] -= p;
                q_spec[d.bus] -= q;
            }
            DeviceModel::ConstImpedanceLoad { .. } => {}
            _ => unreachable!("AC case cannot hold DC devices"),
        }
    }

    // Unknown ordering: angles at non-slack buses, then magnitudes at PQ.
    let ang: Vec<usize> = (0..n).filter(|&h| class[h] != BusClass::Slack).collect();
    let mag: Vec<usize> = (0..n).filter(|&h| class[h] == BusClass::Pq).collect();
    let m = ang.len() + mag.len();

    for it in 0..opts.max_iter {
        let v: Vec<Complex64> =
            (0..n).map(|h| Complex64::from_polar(vm[h], va[h])).collect();
        let s_calc: Vec<Complex64> = (0..n)
            .map(|h| {
                let i: Complex64 = (0..n).map(|k| y[(h, k)] * v[k]).sum();
                v[h] * i.conj()
            })
            .collect();

        let mut f = DVector::zeros(m);
        for (r, &h) in ang.iter().enumerate() {
            f[r] = p_spec[h] - s_calc[h].re;
        }
        for (r, &h) in mag.iter().enumerate() {
            f[ang.len() + r] = q_spec[h] - s_calc[h].im;
        }
        let residual = f.amax();
        if residual < opts.tol {
            return Ok(PfSolution { v, converters: BTreeMap::new(), iterations: it });
        }

        let mut jac = DMatrix::zeros(m, m);
        let theta = |h: usize, k: usize| va[h] - va[k];
        let gb = |h: usize, k: usize| (y[(h, k)].re, y[(h, k)].im);
        for (r, &h) in ang.iter().enumerate() {
            for (c, &k) in ang.iter().enumerate() {
                let (g, b) = gb(h, k);
                jac[(r, c)] = if h == k {
                    -s_calc[h].im - b * vm[h] * vm[h]
                } else {
                    vm[h] * vm[k] * (g * theta(h, k).sin() - b * theta(h, k).cos())
                };
            }
            for (c, &k) in mag.iter().enumerate() {
                let (g, b) = gb(h, k);
                jac[(r, ang.len() + c)] = if h == k {
                    s_calc[h].re / vm[h] + g * vm[h]
                } else {
                    vm[h] * (g * theta(h, k).cos() + b * theta(h, k).sin())
                };
            }
        }
        for (r, &h) in mag.iter().enumerate() {
            for (c, &k) in ang.iter().enumerate() {
                let (g, b) = gb(h, k);
                jac[(ang.len() + r, c)] = if h == k {
                    s_calc[h].re - g * vm[h] * vm[h]
                } else {
                    -vm[h] * vm[k] * (g * theta(h, k).cos() + b * theta(h, k).sin())
                };
            }
            for (c, &k) in mag.iter().enumerate() {
                let (g, b) = gb(h, k);
                jac[(ang.len() + r, ang.len() + c)] = if h == k {
                    s_calc[h].im / vm[h] - b * vm[h]
                } else {
                    vm[h] * (g * theta(h, k).sin() - b * theta(h, k).cos())
                };
            }
        }

        let dx = jac.lu().solve(&f).ok_or(PfError::Singular(it))?;
        for (r, &h) in ang.iter().enumerate() {
            va[h] += dx[r];
        }
        for (r, &h) in mag.iter().enumerate() {
            vm[h] += dx[ang.len() + r];
        }
    }

    let v: Vec<Complex64> = (0..n).map(|h| Complex64::from_polar(vm[h], va[h])).collect();
    let s_worst = (0..n)
        .map(|h| {
            let i: Complex64 = (0..n).map(|k| y[(h, k)] * v[k]).sum();
            (p_spec[h] - (v[h] * i.conj()).re).abs()
        })
        .fold(0.0, f64::max);
    Err(PfError::NotConverged { iterations: opts.max_iter, residual: s_worst })
}
