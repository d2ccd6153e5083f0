//! Time-domain engine: the whole network DAE (machine, converter, tap and
//! secondary-control states, DC inductor currents and capacitor voltages,
//! plus the algebraic bus voltages) is advanced with the implicit
//! trapezoidal rule and one monolithic Newton solve per step. The Jacobian
//! is finite-differenced and its LU factors are reused until convergence
//! slows or the network topology changes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::BTreeMap;

use crate::branches::{
    converter_admittance_block, transformer_admittance_block, Block2, ConverterOperatingPoint,
};
use crate::network::{
    BusKind, ConverterControl, DeviceModel, ElementKind, Event, EventAction, MachineParams,
    NetworkCase, Terminal, TransformerControl, YBus,
};
use crate::powerflow::{self, device_injections, PfSolution};

use super::converter::{self, Measurements};
use super::machine;
use super::trajectory::{EventRecord, Trajectory};
use super::{SimError, SimOptions};

/// Largest tolerated state rate at t = 0. The power-flow translation into
/// dynamic states is exact up to the flow tolerance, so anything beyond
/// this indicates an inconsistent control reference.
const STATIONARITY_TOL: f64 = 1e-8;

/// Relative finite-difference step for Jacobian columns.
const FD_REL: f64 = 1e-7;

/// Rebuild the frozen Jacobian after this many Newton iterations without
/// convergence.
const JAC_REFRESH: usize = 6;

#[derive(Debug, Clone, Copy)]
enum VoltageRef {
    /// Real/imaginary pair in the algebraic block, first index given.
    AcAlg(usize),
    /// Differential capacitor voltage state.
    DcState(usize),
    /// Real algebraic DC voltage.
    DcAlg(usize),
}

struct MachineSlot {
    dev: usize,
    bus: usize,
    x0: usize,
    params: MachineParams,
    init: machine::MachineInit,
    /// (AGC state index, participation factor) terms adding to the
    /// governor reference.
    agc_terms: Vec<(usize, f64)>,
}

impl MachineSlot {
    fn n_states(&self) -> usize {
        4 + self.params.governor.is_some() as usize + self.params.avr.is_some() as usize
    }
}

struct ConverterSlot {
    el: usize,
    ac_bus: usize,
    dc_bus: usize,
    x0: usize,
    y: Complex64,
    ctl: ConverterControl,
    /// Machine slots defining the AC island frequency this converter sees.
    island_machines: Vec<usize>,
    /// Capacitor state index of the DC bus, when its voltage is a state.
    dc_state: Option<usize>,
}

struct LtcSlot {
    el: usize,
    from: usize,
    to: usize,
    x0: usize,
    y_t: Complex64,
    m0: f64,
    alpha0: f64,
    v_ref: f64,
    control: TransformerControl,
}

struct RlSlot {
    el: usize,
    from: usize,
    to: Option<usize>,
    x0: usize,
    r: f64,
    l: f64,
}

struct CapSlot {
    bus: usize,
    x0: usize,
    g: f64,
    c: f64,
}

/// Per-element handle for recording GC shunt currents.
struct GcRecord {
    el: usize,
    cap: usize,
    g: f64,
    c: f64,
}

struct SourceSlot {
    dev: usize,
    bus: usize,
    x0: usize,
    v_ref: f64,
    kp: f64,
    ki: f64,
}

struct AgcSlot {
    area: String,
    x0: usize,
    ki: f64,
    /// Machine slots whose area matches the scheme.
    area_machines: Vec<usize>,
}

pub(super) struct Engine<'a> {
    case: &'a NetworkCase,
    machines: Vec<MachineSlot>,
    converters: Vec<ConverterSlot>,
    ltcs: Vec<LtcSlot>,
    rls: Vec<RlSlot>,
    caps: Vec<CapSlot>,
    gcs: Vec<GcRecord>,
    sources: Vec<SourceSlot>,
    agcs: Vec<AgcSlot>,
    vref: Vec<VoltageRef>,
    n_diff: usize,
    n: usize,
    state_names: Vec<String>,
    el_active: Vec<bool>,
    dev_active: Vec<bool>,
    frozen: Vec<bool>,
    y_static: YBus,
    // Scratch refreshed by every eval.
    v: Vec<Complex64>,
    kcl: Vec<Complex64>,
    i_dev: Vec<Complex64>,
    i_br: Vec<Complex64>,
}

impl<'a> Engine<'a> {
    fn build(case: &'a NetworkCase, sol: &PfSolution) -> (Self, Vec<f64>) {
        let inj = device_injections(case, sol);
        let nb = case.n_buses();
        let mut x = 0usize;
        let mut names = Vec::new();

        let mut machines = Vec::new();
        for (di, d) in case.devices.iter().enumerate() {
            if let DeviceModel::Machine(p) = &d.model {
                let init = machine::init(p, sol.v[d.bus], inj[&d.id]);
                let slot = MachineSlot {
                    dev: di,
                    bus: d.bus,
                    x0: x,
                    params: p.clone(),
                    init,
                    agc_terms: Vec::new(),
                };
                for tail in ["delta", "omega", "eq1", "ed1"] {
                    names.push(format!("mach:{}:{}", d.id, tail));
                }
                if p.governor.is_some() {
                    names.push(format!("mach:{}:pg", d.id));
                }
                if p.avr.is_some() {
                    names.push(format!("mach:{}:ef", d.id));
                }
                x += slot.n_states();
                machines.push(slot);
            }
        }

        let mut caps_by_bus: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for e in &case.elements {
            if let ElementKind::ShuntGc { g, c } = e.kind {
                let slot = caps_by_bus.entry(e.from).or_insert((0.0, 0.0));
                slot.0 += g;
                slot.1 += c;
            }
        }

        let mut converters = Vec::new();
        for (ei, e) in case.elements.iter().enumerate() {
            if let ElementKind::Converter { y, control } = &e.kind {
                let dc_bus = e.to.bus().expect("converter to-terminal is a bus");
                let island_machines = machines
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| case.island[m.bus] == case.island[e.from])
                    .map(|(i, _)| i)
                    .collect();
                converters.push(ConverterSlot {
                    el: ei,
                    ac_bus: e.from,
                    dc_bus,
                    x0: x,
                    y: *y,
                    ctl: control.clone(),
                    island_machines,
                    dc_state: None,
                });
                for tail in ["zd", "zq", "vcmd", "alpha"] {
                    names.push(format!("conv:{}:{}", e.id, tail));
                }
                x += 4;
            }
        }

        let mut ltcs = Vec::new();
        for (ei, e) in case.elements.iter().enumerate() {
            if let ElementKind::Transformer { y_t, m0, alpha0, control: Some(ctl) } = &e.kind {
                let to = e.to.bus().expect("transformer to-terminal is a bus");
                ltcs.push(LtcSlot {
                    el: ei,
                    from: e.from,
                    to,
                    x0: x,
                    y_t: *y_t,
                    m0: *m0,
                    alpha0: *alpha0,
                    v_ref: ctl.v_ref.unwrap_or_else(|| sol.v[to].norm()),
                    control: ctl.clone(),
                });
                names.push(format!("ltc:{}:z", e.id));
                names.push(format!("ltc:{}:m", e.id));
                x += 2;
            }
        }

        let mut rls = Vec::new();
        for (ei, e) in case.elements.iter().enumerate() {
            if let ElementKind::SeriesRl { r, l } = e.kind {
                rls.push(RlSlot { el: ei, from: e.from, to: e.to.bus(), x0: x, r, l });
                names.push(format!("rl:{}:i", e.id));
                x += 1;
            }
        }

        let mut caps = Vec::new();
        for (&bus, &(g, c)) in &caps_by_bus {
            caps.push(CapSlot { bus, x0: x, g, c });
            names.push(format!("bus:{}:v", case.buses[bus].id));
            x += 1;
        }
        for conv in &mut converters {
            conv.dc_state = caps.iter().find(|cp| cp.bus == conv.dc_bus).map(|cp| cp.x0);
        }
        let mut gcs = Vec::new();
        for (ei, e) in case.elements.iter().enumerate() {
            if let ElementKind::ShuntGc { g, c } = e.kind {
                let cap = caps.iter().position(|cp| cp.bus == e.from).unwrap();
                gcs.push(GcRecord { el: ei, cap, g, c });
            }
        }

        let mut sources = Vec::new();
        for (di, d) in case.devices.iter().enumerate() {
            if let DeviceModel::DcVoltageSource { v_ref, kp, ki } = d.model {
                sources.push(SourceSlot { dev: di, bus: d.bus, x0: x, v_ref, kp, ki });
                names.push(format!("src:{}:z", d.id));
                x += 1;
            }
        }

        let mut agcs = Vec::new();
        for scheme in &case.agc {
            let area_machines = machines
                .iter()
                .enumerate()
                .filter(|(_, m)| m.params.area == scheme.area)
                .map(|(i, _)| i)
                .collect();
            for &(dev, w) in &scheme.participation {
                if let Some(m) = machines.iter_mut().find(|m| m.dev == dev) {
                    m.agc_terms.push((x, w));
                }
            }
            agcs.push(AgcSlot { area: scheme.area.clone(), x0: x, ki: scheme.ki, area_machines });
            names.push(format!("agc:{}:z", scheme.area));
            x += 1;
        }

        let n_diff = x;
        let mut vref = vec![VoltageRef::AcAlg(usize::MAX); nb];
        for cap in &caps {
            vref[cap.bus] = VoltageRef::DcState(cap.x0);
        }
        for (b, bus) in case.buses.iter().enumerate() {
            if bus.kind == BusKind::Ac {
                vref[b] = VoltageRef::AcAlg(x);
                names.push(format!("kcl:{}:re", bus.id));
                names.push(format!("kcl:{}:im", bus.id));
                x += 2;
            }
        }
        for (b, bus) in case.buses.iter().enumerate() {
            if bus.kind == BusKind::Dc && !caps_by_bus.contains_key(&b) {
                vref[b] = VoltageRef::DcAlg(x);
                names.push(format!("kcl:{}", bus.id));
                x += 1;
            }
        }
        let n = x;

        // Initial state straight from the power flow.
        let mut w0 = vec![0.0; n];
        for m in &machines {
            w0[m.x0] = m.init.delta;
            w0[m.x0 + 1] = 0.0;
            w0[m.x0 + 2] = m.init.eq1;
            w0[m.x0 + 3] = m.init.ed1;
            let mut k = m.x0 + 4;
            if m.params.governor.is_some() {
                w0[k] = m.init.p_ref;
                k += 1;
            }
            if m.params.avr.is_some() {
                w0[k] = m.init.ef0;
            }
        }
        for c in &converters {
            let sp = sol.converters[&case.elements[c.el].id];
            let vdc0 = sol.v[c.dc_bus].re;
            w0[c.x0] = sp.alpha;
            w0[c.x0 + 1] = sp.m * vdc0;
            w0[c.x0 + 2] = sp.m * vdc0;
            w0[c.x0 + 3] = sp.alpha;
        }
        for l in &ltcs {
            w0[l.x0] = 0.0;
            w0[l.x0 + 1] = l.m0;
        }
        for rl in &rls {
            let vt = rl.to.map(|b| sol.v[b].re).unwrap_or(0.0);
            w0[rl.x0] = (sol.v[rl.from].re - vt) / rl.r;
        }
        for cap in &caps {
            w0[cap.x0] = sol.v[cap.bus].re;
        }
        for s in &sources {
            w0[s.x0] = inj[&case.devices[s.dev].id].re / sol.v[s.bus].re;
        }
        for (b, r) in vref.iter().enumerate() {
            match *r {
                VoltageRef::AcAlg(i) => {
                    w0[i] = sol.v[b].re;
                    w0[i + 1] = sol.v[b].im;
                }
                VoltageRef::DcAlg(i) => w0[i] = sol.v[b].re,
                VoltageRef::DcState(_) => {}
            }
        }

        let mut engine = Engine {
            case,
            machines,
            converters,
            ltcs,
            rls,
            caps,
            gcs,
            sources,
            agcs,
            vref,
            n_diff,
            n,
            state_names: names,
            el_active: vec![true; case.elements.len()],
            dev_active: vec![true; case.devices.len()],
            frozen: vec![false; n],
            y_static: YBus::new(nb),
            v: vec![Complex64::new(0.0, 0.0); nb],
            kcl: vec![Complex64::new(0.0, 0.0); nb],
            i_dev: vec![Complex64::new(0.0, 0.0); case.devices.len()],
            i_br: vec![Complex64::new(0.0, 0.0); case.elements.len()],
        };
        engine.rebuild_y_static();
        (engine, w0)
    }

    /// Constant admittance of the active static elements and fixed-tap
    /// transformers. Everything else injects per evaluation.
    fn rebuild_y_static(&mut self) {
        let mut y = YBus::new(self.case.n_buses());
        for (i, e) in self.case.elements.iter().enumerate() {
            if !self.el_active[i] {
                continue;
            }
            let block = match &e.kind {
                ElementKind::StaticY { y } => Block2::symmetric(*y),
                ElementKind::Transformer { y_t, m0, alpha0, control: None } => {
                    transformer_admittance_block(*y_t, *m0, *alpha0)
                }
                _ => continue,
            };
            y.add(e.from, e.from, block.ff);
            if let Terminal::Bus(to) = e.to {
                y.add(to, to, block.tt);
                y.add(e.from, to, block.ft);
                y.add(to, e.from, block.tf);
            }
        }
        self.y_static = y;
    }

    fn coi_over(&self, slots: &[usize], w: &[f64]) -> f64 {
        let mut hs = 0.0;
        let mut hw = 0.0;
        for &mi in slots {
            let m = &self.machines[mi];
            if self.dev_active[m.dev] {
                hs += m.params.h;
                hw += m.params.h * (1.0 + w[m.x0 + 1]);
            }
        }
        if hs > 0.0 {
            hw / hs
        } else {
            1.0
        }
    }

    /// Rates of every differential state and residuals of every algebraic
    /// equation, plus refreshed voltage/current scratch.
    fn eval(&mut self, w: &[f64], f: &mut [f64]) {
        let zero = Complex64::new(0.0, 0.0);
        f.fill(0.0);
        for (b, r) in self.vref.iter().enumerate() {
            self.v[b] = match *r {
                VoltageRef::AcAlg(i) => Complex64::new(w[i], w[i + 1]),
                VoltageRef::DcState(i) | VoltageRef::DcAlg(i) => Complex64::new(w[i], 0.0),
            };
        }
        self.kcl.fill(zero);
        for (r, c, y) in self.y_static.iter() {
            self.kcl[r] += y * self.v[c];
        }
        self.i_dev.fill(zero);
        self.i_br.fill(zero);
        // Static elements: record the from-side series current.
        for (i, e) in self.case.elements.iter().enumerate() {
            if !self.el_active[i] {
                continue;
            }
            match &e.kind {
                ElementKind::StaticY { y } => {
                    let vt = match e.to {
                        Terminal::Bus(b) => self.v[b],
                        Terminal::Ground => zero,
                    };
                    self.i_br[i] = (self.v[e.from] - vt) * y;
                }
                ElementKind::Transformer { y_t, m0, alpha0, control: None } => {
                    let to = e.to.bus().expect("transformer to-terminal is a bus");
                    let blk = transformer_admittance_block(*y_t, *m0, *alpha0);
                    self.i_br[i] = -(blk.ff * self.v[e.from] + blk.ft * self.v[to]);
                }
                _ => {}
            }
        }

        for mi in 0..self.machines.len() {
            let m = &self.machines[mi];
            if !self.dev_active[m.dev] {
                continue;
            }
            let x = m.x0;
            let p_shift: f64 = m.agc_terms.iter().map(|&(ix, k)| w[ix] * k).sum();
            let has_gov = m.params.governor.is_some();
            let pg = if has_gov { w[x + 4] } else { 0.0 };
            let ef = if m.params.avr.is_some() { w[x + 4 + has_gov as usize] } else { 0.0 };
            let r = machine::rhs(
                &m.params,
                &m.init,
                self.case.omega_nom,
                w[x],
                w[x + 1],
                w[x + 2],
                w[x + 3],
                pg,
                ef,
                self.v[m.bus],
                p_shift,
            );
            f[x] = r.d_delta;
            f[x + 1] = r.d_domega;
            f[x + 2] = r.d_eq1;
            f[x + 3] = r.d_ed1;
            let mut k = x + 4;
            if has_gov {
                f[k] = r.d_pg;
                k += 1;
            }
            if m.params.avr.is_some() {
                f[k] = r.d_ef;
            }
            let bus = m.bus;
            let dev = m.dev;
            self.kcl[bus] += r.i_inj;
            self.i_dev[dev] = r.i_inj;
        }

        for ci in 0..self.converters.len() {
            let c = &self.converters[ci];
            if !self.el_active[c.el] {
                continue;
            }
            let x = c.x0;
            let (zd, zq, vcmd, alpha) = (w[x], w[x + 1], w[x + 2], w[x + 3]);
            let va = self.v[c.ac_bus];
            let vdc = self.v[c.dc_bus].re;
            let m = converter::modulation(&c.ctl, vcmd, vdc);
            let op = ConverterOperatingPoint::stationary(
                m,
                alpha,
                va.arg(),
                va.norm(),
                vdc,
                self.case.omega_nom,
            );
            let blk = converter_admittance_block(c.y, &op);
            let vdc_c = Complex64::new(vdc, 0.0);
            let i_ac = blk.ff * va + blk.ft * vdc_c;
            let i_dc = blk.tf * va + blk.tt * vdc_c;
            let s_ac = va * i_ac.conj();
            let f_coi = self.coi_over(&c.island_machines, w);
            let meas = Measurements {
                v_ac_mag: va.norm(),
                v_dc: vdc,
                p_ac: s_ac.re,
                q_ac: s_ac.im,
                f_coi,
            };
            let rates = converter::control_rhs(&c.ctl, zd, zq, vcmd, alpha, &meas);
            f[x] = rates.d_zd;
            f[x + 1] = rates.d_zq;
            f[x + 2] = rates.d_vcmd;
            f[x + 3] = rates.d_alpha;
            let (ac_bus, dc_bus, el) = (c.ac_bus, c.dc_bus, c.el);
            self.kcl[ac_bus] += i_ac;
            self.kcl[dc_bus] += i_dc;
            self.i_br[el] = -i_ac;
        }

        for li in 0..self.ltcs.len() {
            let l = &self.ltcs[li];
            if !self.el_active[l.el] {
                continue;
            }
            let x = l.x0;
            let m = w[x + 1];
            let blk = transformer_admittance_block(l.y_t, m, l.alpha0);
            let i_f = blk.ff * self.v[l.from] + blk.ft * self.v[l.to];
            let i_t = blk.tf * self.v[l.from] + blk.tt * self.v[l.to];
            let e = self.v[l.to].norm() - l.v_ref;
            f[x] = l.control.ki * e;
            f[x + 1] = (l.m0 + l.control.kp * e + w[x] - m) / l.control.t_actuator;
            let (from, to, el) = (l.from, l.to, l.el);
            self.kcl[from] += i_f;
            self.kcl[to] += i_t;
            self.i_br[el] = -i_f;
        }

        for ri in 0..self.rls.len() {
            let rl = &self.rls[ri];
            if !self.el_active[rl.el] {
                continue;
            }
            let i = w[rl.x0];
            let vf = self.v[rl.from].re;
            let vt = rl.to.map(|b| self.v[b].re).unwrap_or(0.0);
            f[rl.x0] = (vf - vt - rl.r * i) / rl.l;
            let ic = Complex64::new(i, 0.0);
            let (from, to, el) = (rl.from, rl.to, rl.el);
            self.kcl[from] -= ic;
            if let Some(b) = to {
                self.kcl[b] += ic;
            }
            self.i_br[el] = ic;
        }

        for di in 0..self.case.devices.len() {
            if !self.dev_active[di] {
                continue;
            }
            let d = &self.case.devices[di];
            let inj = match &d.model {
                DeviceModel::ConstPowerLoad { p, q } => {
                    let s = -Complex64::new(*p, *q);
                    (s / self.v[d.bus]).conj()
                }
                DeviceModel::ConstImpedanceLoad { y } => -y * self.v[d.bus],
                DeviceModel::DcPower { p } => Complex64::new(p / self.v[d.bus].re, 0.0),
                DeviceModel::Machine(_) | DeviceModel::DcVoltageSource { .. } => continue,
            };
            self.kcl[d.bus] += inj;
            self.i_dev[di] = inj;
        }

        for si in 0..self.sources.len() {
            let s = &self.sources[si];
            if !self.dev_active[s.dev] {
                continue;
            }
            let err = s.v_ref - self.v[s.bus].re;
            let i = Complex64::new(s.kp * err + w[s.x0], 0.0);
            f[s.x0] = s.ki * err;
            let (bus, dev) = (s.bus, s.dev);
            self.kcl[bus] += i;
            self.i_dev[dev] = i;
        }

        // Capacitor buses absorb their KCL sum; every other bus must
        // balance exactly.
        for cap in &self.caps {
            f[cap.x0] = (self.kcl[cap.bus].re - cap.g * w[cap.x0]) / cap.c;
        }
        for g in &self.gcs {
            let cap = &self.caps[g.cap];
            self.i_br[g.el] = Complex64::new(g.g * w[cap.x0] + g.c * f[cap.x0], 0.0);
        }
        for a in &self.agcs {
            let coi = self.coi_over(&a.area_machines, w);
            f[a.x0] = -a.ki * (coi - 1.0);
        }
        for (b, r) in self.vref.iter().enumerate() {
            match *r {
                VoltageRef::AcAlg(i) => {
                    f[i] = self.kcl[b].re;
                    f[i + 1] = self.kcl[b].im;
                }
                VoltageRef::DcAlg(i) => f[i] = self.kcl[b].re,
                VoltageRef::DcState(_) => {}
            }
        }
    }

    /// Trapezoidal step residual. Frozen states are held; algebraic rows
    /// are enforced at the new time directly.
    fn residual(
        &self,
        w: &[f64],
        f_w: &[f64],
        z_prev: &[f64],
        f_prev: &[f64],
        dt: f64,
        out: &mut [f64],
    ) {
        for i in 0..self.n_diff {
            out[i] = if self.frozen[i] {
                w[i] - z_prev[i]
            } else {
                w[i] - z_prev[i] - 0.5 * dt * (f_w[i] + f_prev[i])
            };
        }
        out[self.n_diff..].copy_from_slice(&f_w[self.n_diff..]);
    }

    fn build_jacobian(
        &mut self,
        w: &[f64],
        base_res: &[f64],
        z_prev: &[f64],
        f_prev: &[f64],
        dt: f64,
        t: f64,
    ) -> Result<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, SimError> {
        let n = self.n;
        let mut jac = DMatrix::zeros(n, n);
        let mut wp = w.to_vec();
        let mut fp = vec![0.0; n];
        let mut rp = vec![0.0; n];
        for j in 0..n {
            let h = FD_REL * (1.0 + wp[j].abs());
            let old = wp[j];
            wp[j] = old + h;
            self.eval(&wp, &mut fp);
            self.residual(&wp, &fp, z_prev, f_prev, dt, &mut rp);
            for i in 0..n {
                jac[(i, j)] = (rp[i] - base_res[i]) / h;
            }
            wp[j] = old;
        }
        let lu = jac.lu();
        if !lu.is_invertible() {
            return Err(SimError::SingularJacobian { t });
        }
        Ok(lu)
    }

    /// One trapezoidal step ending at `t`; returns the rates at the
    /// accepted state.
    #[allow(clippy::too_many_arguments)]
    fn newton_step(
        &mut self,
        w: &mut [f64],
        z_prev: &[f64],
        f_prev: &[f64],
        dt: f64,
        t: f64,
        opts: &SimOptions,
        lu: &mut Option<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    ) -> Result<Vec<f64>, SimError> {
        let n = self.n;
        let mut f_w = vec![0.0; n];
        let mut res = vec![0.0; n];
        let mut iter = 0usize;
        loop {
            self.eval(w, &mut f_w);
            self.residual(w, &f_w, z_prev, f_prev, dt, &mut res);
            let norm = res.iter().fold(0.0f64, |a, r| a.max(r.abs()));
            if norm.is_nan() {
                return Err(SimError::StepNonConvergence { t, residual: norm });
            }
            if norm < opts.newton_tol {
                return Ok(f_w);
            }
            if iter >= opts.max_newton {
                return Err(SimError::StepNonConvergence { t, residual: norm });
            }
            if lu.is_none() || (iter > 0 && iter % JAC_REFRESH == 0) {
                *lu = Some(self.build_jacobian(w, &res, z_prev, f_prev, dt, t)?);
            }
            let rhs = DVector::from_column_slice(&res);
            let step = lu
                .as_ref()
                .unwrap()
                .solve(&rhs)
                .ok_or(SimError::SingularJacobian { t })?;
            for i in 0..n {
                w[i] -= step[i];
            }
            iter += 1;
        }
    }

    /// Re-solve the algebraic equations after a topology change, with all
    /// differential states pinned at their current values.
    fn consistency_solve(&mut self, w: &mut [f64], t: f64, opts: &SimOptions) -> Result<(), SimError> {
        let n_alg = self.n - self.n_diff;
        if n_alg == 0 {
            return Ok(());
        }
        let mut f_w = vec![0.0; self.n];
        let mut lu: Option<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
        let mut iter = 0usize;
        loop {
            self.eval(w, &mut f_w);
            let norm = f_w[self.n_diff..].iter().fold(0.0f64, |a, r| a.max(r.abs()));
            if norm.is_nan() {
                return Err(SimError::StepNonConvergence { t, residual: norm });
            }
            if norm < opts.newton_tol {
                return Ok(());
            }
            if iter >= opts.max_newton {
                return Err(SimError::StepNonConvergence { t, residual: norm });
            }
            if lu.is_none() || iter % JAC_REFRESH == 0 {
                let mut jac = DMatrix::zeros(n_alg, n_alg);
                let mut wp = w.to_vec();
                let mut fp = vec![0.0; self.n];
                for j in 0..n_alg {
                    let col = self.n_diff + j;
                    let h = FD_REL * (1.0 + wp[col].abs());
                    let old = wp[col];
                    wp[col] = old + h;
                    self.eval(&wp, &mut fp);
                    for i in 0..n_alg {
                        jac[(i, j)] = (fp[self.n_diff + i] - f_w[self.n_diff + i]) / h;
                    }
                    wp[col] = old;
                }
                let fact = jac.lu();
                if !fact.is_invertible() {
                    return Err(SimError::SingularJacobian { t });
                }
                lu = Some(fact);
            }
            let rhs = DVector::from_column_slice(&f_w[self.n_diff..]);
            let step = lu
                .as_ref()
                .unwrap()
                .solve(&rhs)
                .ok_or(SimError::SingularJacobian { t })?;
            for j in 0..n_alg {
                w[self.n_diff + j] -= step[j];
            }
            iter += 1;
        }
    }

    fn apply_event(&mut self, ev: &Event, w: &mut [f64]) {
        match ev.action {
            EventAction::DisconnectBranch => {
                for (i, e) in self.case.elements.iter().enumerate() {
                    if e.branch != ev.target {
                        continue;
                    }
                    self.el_active[i] = false;
                    if let Some(rl) = self.rls.iter().find(|r| r.el == i) {
                        w[rl.x0] = 0.0;
                        self.frozen[rl.x0] = true;
                    }
                }
            }
            EventAction::DisconnectDevice => {
                self.dev_active[ev.target] = false;
                if let Some(m) = self.machines.iter().find(|m| m.dev == ev.target) {
                    for i in m.x0..m.x0 + m.n_states() {
                        self.frozen[i] = true;
                    }
                }
                if let Some(s) = self.sources.iter().find(|s| s.dev == ev.target) {
                    self.frozen[s.x0] = true;
                }
            }
        }
    }

    fn channel_names(&self) -> Vec<String> {
        let case = self.case;
        let mut names = Vec::new();
        for m in &self.machines {
            let id = &case.devices[m.dev].id;
            for tail in ["delta", "omega", "eq1", "ed1"] {
                names.push(format!("mach:{id}:{tail}"));
            }
            if m.params.governor.is_some() {
                names.push(format!("mach:{id}:pg"));
            }
            if m.params.avr.is_some() {
                names.push(format!("mach:{id}:ef"));
            }
        }
        for c in &self.converters {
            let id = &case.elements[c.el].id;
            for tail in ["m", "alpha", "dmdt", "dalphadt", "zd", "zq", "vcmd"] {
                names.push(format!("conv:{id}:{tail}"));
            }
        }
        for l in &self.ltcs {
            let id = &case.elements[l.el].id;
            for tail in ["m", "dmdt", "z"] {
                names.push(format!("ltc:{id}:{tail}"));
            }
        }
        for rl in &self.rls {
            let id = &case.elements[rl.el].id;
            names.push(format!("rl:{id}:i"));
            names.push(format!("rl:{id}:didt"));
        }
        for cap in &self.caps {
            names.push(format!("bus:{}:dvdt", case.buses[cap.bus].id));
        }
        for s in &self.sources {
            let id = &case.devices[s.dev].id;
            names.push(format!("src:{id}:z"));
            names.push(format!("src:{id}:i"));
        }
        for a in &self.agcs {
            names.push(format!("agc:{}:z", a.area));
        }
        for area in case.areas() {
            names.push(format!("coi:{area}"));
        }
        for d in &case.devices {
            names.push(format!("dev:{}:p", d.id));
            names.push(format!("dev:{}:q", d.id));
        }
        for e in &case.elements {
            names.push(format!("br:{}:ire", e.id));
            names.push(format!("br:{}:iim", e.id));
        }
        names
    }

    /// One recorded row, mirroring `channel_names` exactly. Assumes `eval`
    /// ran last at `w`, so the voltage and current scratch match.
    fn record_row(&self, w: &[f64], f_w: &[f64], last_coi: &mut BTreeMap<String, f64>) -> Vec<f64> {
        let mut row = Vec::new();
        for m in &self.machines {
            let x = m.x0;
            row.push(w[x]);
            row.push(1.0 + w[x + 1]);
            row.push(w[x + 2]);
            row.push(w[x + 3]);
            let mut k = x + 4;
            if m.params.governor.is_some() {
                row.push(w[k]);
                k += 1;
            }
            if m.params.avr.is_some() {
                row.push(w[k]);
            }
        }
        for c in &self.converters {
            let x = c.x0;
            let (vcmd, alpha) = (w[x + 2], w[x + 3]);
            let vdc = self.v[c.dc_bus].re;
            let m = converter::modulation(&c.ctl, vcmd, vdc);
            let dmdt = if converter::clamped(&c.ctl, vcmd, vdc) {
                0.0
            } else {
                match c.dc_state {
                    Some(ix) => (f_w[x + 2] * vdc - vcmd * f_w[ix]) / (vdc * vdc),
                    None => f64::NAN,
                }
            };
            row.push(m);
            row.push(alpha);
            row.push(dmdt);
            row.push(f_w[x + 3]);
            row.push(w[x]);
            row.push(w[x + 1]);
            row.push(vcmd);
        }
        for l in &self.ltcs {
            row.push(w[l.x0 + 1]);
            row.push(f_w[l.x0 + 1]);
            row.push(w[l.x0]);
        }
        for rl in &self.rls {
            row.push(w[rl.x0]);
            row.push(f_w[rl.x0]);
        }
        for cap in &self.caps {
            row.push(f_w[cap.x0]);
        }
        for s in &self.sources {
            row.push(w[s.x0]);
            row.push(self.i_dev[s.dev].re);
        }
        for a in &self.agcs {
            row.push(w[a.x0]);
        }
        for area in self.case.areas() {
            let slots: Vec<usize> = self
                .machines
                .iter()
                .enumerate()
                .filter(|(_, m)| m.params.area == area && self.dev_active[m.dev])
                .map(|(i, _)| i)
                .collect();
            let value = if slots.is_empty() {
                *last_coi.get(&area).unwrap_or(&1.0)
            } else {
                let v = self.coi_over(&slots, w);
                last_coi.insert(area.clone(), v);
                v
            };
            row.push(value);
        }
        for (di, d) in self.case.devices.iter().enumerate() {
            let s = self.v[d.bus] * self.i_dev[di].conj();
            row.push(s.re);
            row.push(s.im);
        }
        for i in 0..self.case.elements.len() {
            row.push(self.i_br[i].re);
            row.push(self.i_br[i].im);
        }
        row
    }
}

pub(super) fn run(case: &NetworkCase, opts: &SimOptions) -> Result<Trajectory, SimError> {
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(SimError::BadOptions("dt must be positive and finite".into()));
    }
    if !(opts.tstop > 0.0 && opts.tstop.is_finite()) {
        return Err(SimError::BadOptions("tstop must be positive and finite".into()));
    }
    if !(opts.newton_tol > 0.0) || opts.max_newton == 0 {
        return Err(SimError::BadOptions("newton settings must be positive".into()));
    }
    let nsteps = (opts.tstop / opts.dt).round() as usize;
    if nsteps == 0 {
        return Err(SimError::BadOptions("tstop shorter than one step".into()));
    }
    let dt = opts.dt;

    // Events must land exactly on the sample grid.
    let mut event_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in case.events.iter().enumerate() {
        if e.t > (nsteps as f64) * dt + 1e-9 {
            continue;
        }
        let k = (e.t / dt).round() as usize;
        if k == 0 || (k as f64 * dt - e.t).abs() > 1e-9 {
            return Err(SimError::EventOffGrid { t: e.t, dt });
        }
        event_groups.entry(k).or_default().push(i);
    }

    let sol = powerflow::solve(case, &opts.pf)?;
    let (mut engine, mut w) = Engine::build(case, &sol);
    let n = engine.n;

    let mut f_w = vec![0.0; n];
    engine.eval(&w, &mut f_w);
    let mut bad = Vec::new();
    for i in 0..engine.n_diff {
        if f_w[i].abs() > STATIONARITY_TOL {
            bad.push(format!("{} ({:.3e})", engine.state_names[i], f_w[i]));
        }
    }
    if !bad.is_empty() {
        return Err(SimError::InitResidual(bad.join(", ")));
    }

    let names = engine.channel_names();
    let mut traj = Trajectory {
        case_name: case.name.clone(),
        dt,
        times: Vec::with_capacity(nsteps + 1),
        bus_ids: case.buses.iter().map(|b| b.id.clone()).collect(),
        v: vec![Vec::with_capacity(nsteps + 1); case.n_buses()],
        channels: names
            .into_iter()
            .map(|nm| (nm, Vec::with_capacity(nsteps + 1)))
            .collect(),
        segments: vec![0],
        events: Vec::new(),
    };
    let mut last_coi = BTreeMap::new();

    let record =
        |traj: &mut Trajectory,
         engine: &Engine,
         t: f64,
         w: &[f64],
         f_w: &[f64],
         last_coi: &mut BTreeMap<String, f64>| {
            traj.times.push(t);
            for (b, vb) in traj.v.iter_mut().enumerate() {
                vb.push(engine.v[b]);
            }
            let row = engine.record_row(w, f_w, last_coi);
            debug_assert_eq!(row.len(), traj.channels.len());
            for (slot, val) in traj.channels.iter_mut().zip(row) {
                slot.1.push(val);
            }
        };

    record(&mut traj, &engine, 0.0, &w, &f_w, &mut last_coi);

    let mut z_prev = w.clone();
    let mut f_prev = f_w.clone();
    let mut lu: Option<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;

    for k in 1..=nsteps {
        let t = k as f64 * dt;
        let mut f_now = engine.newton_step(&mut w, &z_prev, &f_prev, dt, t, opts, &mut lu)?;
        if let Some(evs) = event_groups.get(&k) {
            let v_pre = engine.v.clone();
            for &ei in evs {
                engine.apply_event(&case.events[ei], &mut w);
            }
            engine.rebuild_y_static();
            engine.consistency_solve(&mut w, t, opts)?;
            engine.eval(&w, &mut f_now);
            let jump = v_pre
                .iter()
                .zip(&engine.v)
                .fold(0.0f64, |a, (pre, post)| a.max((post - pre).norm()));
            for &ei in evs {
                traj.events.push(EventRecord {
                    t,
                    sample: k,
                    description: case.describe_event(&case.events[ei]),
                    max_voltage_jump: jump,
                });
            }
            traj.segments.push(k);
            lu = None;
        }
        record(&mut traj, &engine, t, &w, &f_now, &mut last_coi);
        z_prev.copy_from_slice(&w);
        f_prev.copy_from_slice(&f_now);
    }
    Ok(traj)
}
