//! Hybrid AC/DC network model.
//!
//! A case is a set of buses (AC or DC), two-terminal branches, shunt
//! devices, and timed disconnection events. Branches may be constant
//! admittances or dynamic elements whose admittance carries its own complex
//! frequency: series RL, parallel GC, regulating transformers, and averaged
//! AC/DC converters.
//!
//! # Sign convention
//!
//! Branch admittances enter the bus matrix with the convention used
//! throughout this crate: the off-diagonal entry `(h, k)` is the branch
//! admittance itself and the diagonal holds the *negative* sum of all
//! admittances incident to the bus (shunts included). Equivalently, with
//! `i_h` the net device current injected at bus `h`:
//!
//! ```text
//!     Y_bus * v + i = 0,        Y_hh = -sum_k Y_hk - Y_shunt,h
//! ```
//!
//! This is the negative of the textbook bus admittance matrix. It makes the
//! per-branch current `i_{h->k} = (v_h - v_k) Y_hk` and keeps every
//! decomposition coefficient free of stray minus signs. Anything that needs
//! the textbook matrix negates this one.

mod schema;

use crate::branches::{Block2, BranchCfState, YNow};
use num_complex::Complex64;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    /// Malformed fields or dangling references.
    #[error("schema: {0}")]
    Schema(String),
    /// Structurally invalid network.
    #[error("topology: {0}")]
    Topology(String),
    /// Non-positive bases or out-of-range physical parameters.
    #[error("units: {0}")]
    Unit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Ac,
    Dc,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Initial magnitude guess, pu.
    pub v0: f64,
    /// Initial angle guess, rad.
    pub theta0: f64,
}

/// Second terminal of a primitive element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    Bus(usize),
    Ground,
}

impl Terminal {
    pub fn bus(self) -> Option<usize> {
        match self {
            Terminal::Bus(b) => Some(b),
            Terminal::Ground => None,
        }
    }
}

/// Continuous tap regulation: PI on the tap-side voltage magnitude error
/// feeding a first-order tap actuator.
#[derive(Debug, Clone)]
pub struct TransformerControl {
    /// Regulated tap-side voltage, pu; `None` means hold the initial value.
    pub v_ref: Option<f64>,
    pub kp: f64,
    pub ki: f64,
    pub t_actuator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DMode {
    VDc,
    FAc,
    PAc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    VAc,
    QAc,
}

#[derive(Debug, Clone)]
pub struct ConverterControl {
    pub d_mode: DMode,
    pub q_mode: QMode,
    /// Scheduled AC-side P injection, pu (power flow, non-`v_dc` modes).
    pub p_sched: f64,
    pub v_dc_ref: f64,
    pub v_ac_ref: Option<f64>,
    pub q_sched: f64,
    pub f_ref: f64,
    pub kp_d: f64,
    pub ki_d: f64,
    pub kp_q: f64,
    pub ki_q: f64,
    pub t_actuator: f64,
    pub m_min: f64,
    pub m_max: f64,
}

/// Branch model as authored in the case file.
#[derive(Debug, Clone)]
pub enum BranchModel {
    ConstantY { y: Complex64 },
    SeriesRl { r: f64, l: f64 },
    ShuntGc { g: f64, c: f64 },
    PiLine { r: f64, l: f64, c_half: f64 },
    Transformer { y_t: Complex64, m0: f64, alpha0: f64, control: Option<TransformerControl> },
    Converter { y: Complex64, control: ConverterControl },
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: String,
    pub from: usize,
    pub to: Terminal,
    pub model: BranchModel,
}

/// Primitive network edge after pi-line expansion. Analysis, assembly, and
/// simulation all work on elements; `branch` points back at the authored
/// entry.
#[derive(Debug, Clone)]
pub struct Element {
    pub id: String,
    pub branch: usize,
    pub from: usize,
    pub to: Terminal,
    pub kind: ElementKind,
}

#[derive(Debug, Clone)]
pub enum ElementKind {
    StaticY { y: Complex64 },
    SeriesRl { r: f64, l: f64 },
    ShuntGc { g: f64, c: f64 },
    Transformer { y_t: Complex64, m0: f64, alpha0: f64, control: Option<TransformerControl> },
    Converter { y: Complex64, control: ConverterControl },
}

impl ElementKind {
    /// Dynamic elements need caller-supplied instantaneous state during
    /// admittance assembly.
    pub fn is_dynamic(&self) -> bool {
        !matches!(self, ElementKind::StaticY { .. })
    }
}

#[derive(Debug, Clone)]
pub struct GovernorParams {
    pub r_droop: f64,
    pub t_g: f64,
}

#[derive(Debug, Clone)]
pub struct AvrParams {
    pub ka: f64,
    pub ta: f64,
}

#[derive(Debug, Clone)]
pub enum MachinePf {
    Slack { v_set: f64 },
    Pv { p_set: f64, v_set: f64 },
}

#[derive(Debug, Clone)]
pub struct MachineParams {
    pub h: f64,
    pub d: f64,
    pub xd: f64,
    pub xq: f64,
    pub xd1: f64,
    pub xq1: f64,
    pub td01: f64,
    pub tq01: f64,
    pub ra: f64,
    pub pf: MachinePf,
    pub governor: Option<GovernorParams>,
    pub avr: Option<AvrParams>,
    pub area: String,
}

#[derive(Debug, Clone)]
pub enum DeviceModel {
    Machine(MachineParams),
    /// Consumed powers, positive = load.
    ConstPowerLoad { p: f64, q: f64 },
    /// Consumed admittance.
    ConstImpedanceLoad { y: Complex64 },
    /// Injected DC power, positive into the bus.
    DcPower { p: f64 },
    /// PI current source regulating its bus voltage (DC slack).
    DcVoltageSource { v_ref: f64, kp: f64, ki: f64 },
}

#[derive(Debug, Clone)]
pub struct Device {
    pub id: String,
    pub bus: usize,
    pub model: DeviceModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventAction {
    DisconnectBranch,
    DisconnectDevice,
}

#[derive(Debug, Clone)]
pub struct Event {
    pub t: f64,
    pub action: EventAction,
    /// Index into `branches` or `devices` depending on the action.
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct AgcScheme {
    pub area: String,
    pub ki: f64,
    /// (machine device index, normalized participation factor)
    pub participation: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub f_nom_hz: f64,
    /// `2 pi f_nom`, rad/s.
    pub omega_nom: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub elements: Vec<Element>,
    pub devices: Vec<Device>,
    pub events: Vec<Event>,
    pub agc: Vec<AgcScheme>,
    bus_index: BTreeMap<String, usize>,
    /// Synchronous-island label per bus (AC islands and DC islands counted
    /// separately, converters do not merge islands).
    pub island: Vec<usize>,
    pub n_islands: usize,
}

impl NetworkCase {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Elements incident to a bus, as (element index, other terminal).
    pub fn incident(&self, bus: usize) -> Vec<(usize, Terminal)> {
        let mut out = Vec::new();
        for (i, e) in self.elements.iter().enumerate() {
            if e.from == bus {
                out.push((i, e.to));
            } else if e.to == Terminal::Bus(bus) {
                out.push((i, Terminal::Bus(e.from)));
            }
        }
        out
    }

    /// Whether a branch (and all its elements) is connected at time `t`.
    /// Disconnections take effect exactly at the event time.
    pub fn branch_active(&self, branch: usize, t: f64) -> bool {
        !self.events.iter().any(|e| {
            e.action == EventAction::DisconnectBranch && e.target == branch && t >= e.t
        })
    }

    pub fn device_active(&self, device: usize, t: f64) -> bool {
        !self.events.iter().any(|e| {
            e.action == EventAction::DisconnectDevice && e.target == device && t >= e.t
        })
    }

    pub fn element_active(&self, element: usize, t: f64) -> bool {
        self.branch_active(self.elements[element].branch, t)
    }

    pub fn describe_event(&self, e: &Event) -> String {
        match e.action {
            EventAction::DisconnectBranch => {
                format!("disconnect branch {:?}", self.branches[e.target].id)
            }
            EventAction::DisconnectDevice => {
                format!("disconnect device {:?}", self.devices[e.target].id)
            }
        }
    }

    /// Machine device indices, in authored order.
    pub fn machines(&self) -> Vec<usize> {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d.model, DeviceModel::Machine(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Converter element indices, in authored order.
    pub fn converters(&self) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.kind, ElementKind::Converter { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct COI area labels, sorted.
    pub fn areas(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for d in &self.devices {
            if let DeviceModel::Machine(m) = &d.model {
                set.insert(m.area.clone());
            }
        }
        set.into_iter().collect()
    }
}

fn admittance_from(
    what: &str,
    g: Option<f64>,
    b: Option<f64>,
    r: Option<f64>,
    x: Option<f64>,
) -> Result<Complex64, CaseError> {
    match (g, b, r, x) {
        (None, None, r, x) if r.is_some() || x.is_some() => {
            let z = Complex64::new(r.unwrap_or(0.0), x.unwrap_or(0.0));
            if z.norm() == 0.0 {
                return Err(CaseError::Unit(format!("{what}: zero impedance")));
            }
            Ok(z.inv())
        }
        (g, b, None, None) if g.is_some() || b.is_some() => {
            Ok(Complex64::new(g.unwrap_or(0.0), b.unwrap_or(0.0)))
        }
        (None, None, None, None) => {
            Err(CaseError::Schema(format!("{what}: give either (g, b) or (r, x)")))
        }
        _ => Err(CaseError::Schema(format!("{what}: (g, b) and (r, x) are mutually exclusive"))),
    }
}

fn either(
    what: &str,
    field_a: &str,
    a: Option<f64>,
    field_b: &str,
    b: Option<f64>,
    scale_b: f64,
) -> Result<f64, CaseError> {
    match (a, b) {
        (Some(v), None) => Ok(v),
        (None, Some(v)) => Ok(v * scale_b),
        (None, None) => {
            Err(CaseError::Schema(format!("{what}: give either {field_a} or {field_b}")))
        }
        (Some(_), Some(_)) => {
            Err(CaseError::Schema(format!("{what}: {field_a} and {field_b} are mutually exclusive")))
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

/// Parses and validates a JSON case.
pub fn parse_case(json: &str) -> Result<NetworkCase, CaseError> {
    let file: schema::CaseFile =
        serde_json::from_str(json).map_err(|e| CaseError::Schema(e.to_string()))?;
    build_case(file)
}

fn build_case(file: schema::CaseFile) -> Result<NetworkCase, CaseError> {
    if file.base_mva <= 0.0 {
        return Err(CaseError::Unit(format!("base_mva must be positive, got {}", file.base_mva)));
    }
    if file.f_nom_hz <= 0.0 {
        return Err(CaseError::Unit(format!("f_nom_hz must be positive, got {}", file.f_nom_hz)));
    }
    let omega_nom = 2.0 * PI * file.f_nom_hz;

    if file.buses.is_empty() {
        return Err(CaseError::Schema("case has no buses".into()));
    }
    let mut bus_index = BTreeMap::new();
    let mut buses = Vec::with_capacity(file.buses.len());
    for b in &file.buses {
        if b.id == "ground" {
            return Err(CaseError::Schema("bus id \"ground\" is reserved".into()));
        }
        if bus_index.insert(b.id.clone(), buses.len()).is_some() {
            return Err(CaseError::Schema(format!("duplicate bus id {:?}", b.id)));
        }
        if b.base_kv <= 0.0 {
            return Err(CaseError::Unit(format!("bus {:?}: base_kv must be positive", b.id)));
        }
        if b.v0 <= 0.0 {
            return Err(CaseError::Unit(format!("bus {:?}: v0 must be positive", b.id)));
        }
        let kind = match b.kind {
            schema::BusKindEntry::Ac => BusKind::Ac,
            schema::BusKindEntry::Dc => BusKind::Dc,
        };
        if kind == BusKind::Dc && b.theta0 != 0.0 {
            return Err(CaseError::Schema(format!("bus {:?}: DC buses take no theta0", b.id)));
        }
        buses.push(Bus { id: b.id.clone(), kind, base_kv: b.base_kv, v0: b.v0, theta0: b.theta0 });
    }

    let lookup = |what: &str, id: &str| -> Result<usize, CaseError> {
        bus_index
            .get(id)
            .copied()
            .ok_or_else(|| CaseError::Schema(format!("{what}: unknown bus {id:?}")))
    };

    let mut branches = Vec::new();
    let mut elements: Vec<Element> = Vec::new();
    let mut branch_ids = BTreeSet::new();
    for br in &file.branches {
        if !branch_ids.insert(br.id.clone()) {
            return Err(CaseError::Schema(format!("duplicate branch id {:?}", br.id)));
        }
        let what = format!("branch {:?}", br.id);
        let from = lookup(&what, &br.from)?;
        let to = if br.to == "ground" { Terminal::Ground } else { Terminal::Bus(lookup(&what, &br.to)?) };
        if to == Terminal::Bus(from) {
            return Err(CaseError::Topology(format!("{what}: both terminals on bus {:?}", br.from)));
        }
        let from_kind = buses[from].kind;
        let to_kind = to.bus().map(|b| buses[b].kind);
        let same_kind_required = |what: &str| -> Result<(), CaseError> {
            match to_kind {
                Some(k) if k != from_kind => Err(CaseError::Topology(format!(
                    "{what}: terminals mix AC and DC buses"
                ))),
                _ => Ok(()),
            }
        };

        let model = match &br.model {
            schema::BranchModelEntry::ConstantY { g, b, r, x } => {
                same_kind_required(&what)?;
                let y = admittance_from(&what, *g, *b, *r, *x)?;
                if from_kind == BusKind::Dc && y.im != 0.0 {
                    return Err(CaseError::Schema(format!("{what}: DC admittances are real")));
                }
                BranchModel::ConstantY { y }
            }
            // RL and GC elements carry their own dynamics and are DC-only;
            // AC networks are quasi-stationary, so the same hardware on the
            // AC side is authored as a constant admittance at nominal
            // frequency (what pi-line expansion does).
            schema::BranchModelEntry::SeriesRl { r, l, x } => {
                if from_kind != BusKind::Dc {
                    return Err(CaseError::Topology(format!(
                        "{what}: series RL elements connect DC buses (use constant_y or pi_line on AC)"
                    )));
                }
                same_kind_required(&what)?;
                if to == Terminal::Ground {
                    return Err(CaseError::Topology(format!("{what}: series RL cannot terminate at ground")));
                }
                let l = either(&what, "l", *l, "x", *x, 1.0 / omega_nom)?;
                if l <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: inductance must be positive")));
                }
                if *r <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: resistance must be positive")));
                }
                BranchModel::SeriesRl { r: *r, l }
            }
            schema::BranchModelEntry::ShuntGc { g, c, b } => {
                if from_kind != BusKind::Dc {
                    return Err(CaseError::Topology(format!(
                        "{what}: GC shunts connect DC buses (use constant_y on AC)"
                    )));
                }
                if to != Terminal::Ground {
                    return Err(CaseError::Topology(format!("{what}: GC shunts terminate at ground")));
                }
                let c = either(&what, "c", *c, "b", *b, 1.0 / omega_nom)?;
                if c <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: capacitance must be positive")));
                }
                if *g < 0.0 {
                    return Err(CaseError::Unit(format!("{what}: negative conductance")));
                }
                BranchModel::ShuntGc { g: *g, c }
            }
            schema::BranchModelEntry::PiLine { r, l, x, c_half, b } => {
                same_kind_required(&what)?;
                if to == Terminal::Ground {
                    return Err(CaseError::Topology(format!("{what}: pi-line cannot terminate at ground")));
                }
                let l = either(&what, "l", *l, "x", *x, 1.0 / omega_nom)?;
                let c_half = match (c_half, b) {
                    (None, None) => 0.0,
                    _ => either(&what, "c_half", *c_half, "b", *b, 0.5 / omega_nom)?,
                };
                if l <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: inductance must be positive")));
                }
                if *r < 0.0 || c_half < 0.0 {
                    return Err(CaseError::Unit(format!("{what}: negative parameter")));
                }
                if from_kind == BusKind::Dc && *r == 0.0 {
                    return Err(CaseError::Unit(format!(
                        "{what}: DC lines need positive resistance for a defined steady state"
                    )));
                }
                BranchModel::PiLine { r: *r, l, c_half }
            }
            schema::BranchModelEntry::Transformer { g, b, r, x, m0, alpha0, control } => {
                same_kind_required(&what)?;
                if from_kind != BusKind::Ac {
                    return Err(CaseError::Topology(format!("{what}: transformers are AC elements")));
                }
                if to == Terminal::Ground {
                    return Err(CaseError::Topology(format!("{what}: transformer cannot terminate at ground")));
                }
                if *m0 <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: m0 must be positive")));
                }
                let y_t = admittance_from(&what, *g, *b, *r, *x)?;
                let control = control.as_ref().map(|c| TransformerControl {
                    v_ref: c.v_ref,
                    kp: c.kp,
                    ki: c.ki,
                    t_actuator: c.t_actuator,
                });
                BranchModel::Transformer { y_t, m0: *m0, alpha0: *alpha0, control }
            }
            schema::BranchModelEntry::Converter { g, b, r, x, control } => {
                let to_bus = to.bus().ok_or_else(|| {
                    CaseError::Topology(format!("{what}: converter cannot terminate at ground"))
                })?;
                if from_kind != BusKind::Ac || buses[to_bus].kind != BusKind::Dc {
                    return Err(CaseError::Topology(format!(
                        "{what}: converter needs an AC `from` bus and a DC `to` bus"
                    )));
                }
                let y = admittance_from(&what, *g, *b, *r, *x)?;
                let c = control;
                let d_mode = match c.d_mode {
                    schema::DModeEntry::VDc => DMode::VDc,
                    schema::DModeEntry::FAc => DMode::FAc,
                    schema::DModeEntry::PAc => DMode::PAc,
                };
                let q_mode = match c.q_mode {
                    schema::QModeEntry::VAc => QMode::VAc,
                    schema::QModeEntry::QAc => QMode::QAc,
                };
                if d_mode == DMode::VDc && c.v_dc_ref.is_none() {
                    return Err(CaseError::Schema(format!("{what}: v_dc mode needs v_dc_ref")));
                }
                if d_mode != DMode::VDc && c.p_sched.is_none() {
                    return Err(CaseError::Schema(format!("{what}: {d_mode:?} mode needs p_sched")));
                }
                if q_mode == QMode::VAc && c.v_ac_ref.is_none() {
                    return Err(CaseError::Schema(format!("{what}: v_ac mode needs v_ac_ref")));
                }
                if q_mode == QMode::QAc && c.q_sched.is_none() {
                    return Err(CaseError::Schema(format!("{what}: q_ac mode needs q_sched")));
                }
                if c.m_min <= 0.0 || c.m_max <= c.m_min {
                    return Err(CaseError::Unit(format!("{what}: need 0 < m_min < m_max")));
                }
                BranchModel::Converter {
                    y,
                    control: ConverterControl {
                        d_mode,
                        q_mode,
                        p_sched: c.p_sched.unwrap_or(0.0),
                        v_dc_ref: c.v_dc_ref.unwrap_or(1.0),
                        v_ac_ref: c.v_ac_ref,
                        q_sched: c.q_sched.unwrap_or(0.0),
                        f_ref: c.f_ref,
                        kp_d: c.kp_d,
                        ki_d: c.ki_d,
                        kp_q: c.kp_q,
                        ki_q: c.ki_q,
                        t_actuator: c.t_actuator,
                        m_min: c.m_min,
                        m_max: c.m_max,
                    },
                }
            }
        };

        let branch_idx = branches.len();
        // Pi-lines expand to primitives; AC pi-sections stay constant
        // (quasi-stationary at nominal frequency), DC ones become dynamic.
        match &model {
            BranchModel::PiLine { r, l, c_half } => {
                let Terminal::Bus(to_bus) = to else { unreachable!() };
                if from_kind == BusKind::Ac {
                    let y_series = Complex64::new(*r, omega_nom * *l).inv();
                    let y_sh = Complex64::new(0.0, omega_nom * *c_half);
                    elements.push(Element {
                        id: format!("{}/rl", br.id),
                        branch: branch_idx,
                        from,
                        to,
                        kind: ElementKind::StaticY { y: y_series },
                    });
                    if *c_half > 0.0 {
                        for (suffix, bus) in [(&br.from, from), (&br.to, to_bus)] {
                            elements.push(Element {
                                id: format!("{}/c:{}", br.id, suffix),
                                branch: branch_idx,
                                from: bus,
                                to: Terminal::Ground,
                                kind: ElementKind::StaticY { y: y_sh },
                            });
                        }
                    }
                } else {
                    elements.push(Element {
                        id: format!("{}/rl", br.id),
                        branch: branch_idx,
                        from,
                        to,
                        kind: ElementKind::SeriesRl { r: *r, l: *l },
                    });
                    if *c_half > 0.0 {
                        for (suffix, bus) in [(&br.from, from), (&br.to, to_bus)] {
                            elements.push(Element {
                                id: format!("{}/c:{}", br.id, suffix),
                                branch: branch_idx,
                                from: bus,
                                to: Terminal::Ground,
                                kind: ElementKind::ShuntGc { g: 0.0, c: *c_half },
                            });
                        }
                    }
                }
            }
            BranchModel::ConstantY { y } => elements.push(Element {
                id: br.id.clone(),
                branch: branch_idx,
                from,
                to,
                kind: ElementKind::StaticY { y: *y },
            }),
            BranchModel::SeriesRl { r, l } => elements.push(Element {
                id: br.id.clone(),
                branch: branch_idx,
                from,
                to,
                kind: ElementKind::SeriesRl { r: *r, l: *l },
            }),
            BranchModel::ShuntGc { g, c } => elements.push(Element {
                id: br.id.clone(),
                branch: branch_idx,
                from,
                to,
                kind: ElementKind::ShuntGc { g: *g, c: *c },
            }),
            BranchModel::Transformer { y_t, m0, alpha0, control } => elements.push(Element {
                id: br.id.clone(),
                branch: branch_idx,
                from,
                to,
                kind: ElementKind::Transformer {
                    y_t: *y_t,
                    m0: *m0,
                    alpha0: *alpha0,
                    control: control.clone(),
                },
            }),
            BranchModel::Converter { y, control } => elements.push(Element {
                id: br.id.clone(),
                branch: branch_idx,
                from,
                to,
                kind: ElementKind::Converter { y: *y, control: control.clone() },
            }),
        }
        branches.push(Branch { id: br.id.clone(), from, to, model });
    }

    // Islands: same-kind connectivity, converters do not merge.
    let mut uf = UnionFind::new(buses.len());
    for e in &elements {
        if let (Terminal::Bus(to), false) =
            (e.to, matches!(e.kind, ElementKind::Converter { .. }))
        {
            uf.union(e.from, to);
        }
    }
    let mut island_label = BTreeMap::new();
    let mut island = vec![0usize; buses.len()];
    for i in 0..buses.len() {
        let root = uf.find(i);
        let next = island_label.len();
        island[i] = *island_label.entry(root).or_insert(next);
    }
    let n_islands = island_label.len();

    let mut devices = Vec::new();
    let mut device_ids = BTreeSet::new();
    for d in &file.devices {
        if !device_ids.insert(d.id.clone()) {
            return Err(CaseError::Schema(format!("duplicate device id {:?}", d.id)));
        }
        let what = format!("device {:?}", d.id);
        let bus = lookup(&what, &d.bus)?;
        let kind = buses[bus].kind;
        let model = match &d.model {
            schema::DeviceModelEntry::Machine {
                h,
                d: damp,
                xd,
                xq,
                xd1,
                xq1,
                td01,
                tq01,
                ra,
                pf,
                governor,
                avr,
                area,
            } => {
                if kind != BusKind::Ac {
                    return Err(CaseError::Topology(format!("{what}: machines attach to AC buses")));
                }
                for (name, v) in
                    [("h", *h), ("xd", *xd), ("xq", *xq), ("xd1", *xd1), ("xq1", *xq1), ("td01", *td01), ("tq01", *tq01)]
                {
                    if v <= 0.0 {
                        return Err(CaseError::Unit(format!("{what}: {name} must be positive")));
                    }
                }
                let pf = match pf {
                    schema::MachinePfEntry::Slack { v_set } => MachinePf::Slack { v_set: *v_set },
                    schema::MachinePfEntry::Pv { p_set, v_set } => {
                        MachinePf::Pv { p_set: *p_set, v_set: *v_set }
                    }
                };
                DeviceModel::Machine(MachineParams {
                    h: *h,
                    d: *damp,
                    xd: *xd,
                    xq: *xq,
                    xd1: *xd1,
                    xq1: *xq1,
                    td01: *td01,
                    tq01: *tq01,
                    ra: *ra,
                    pf,
                    governor: governor
                        .as_ref()
                        .map(|g| GovernorParams { r_droop: g.r_droop, t_g: g.t_g }),
                    avr: avr.as_ref().map(|a| AvrParams { ka: a.ka, ta: a.ta }),
                    area: area.clone().unwrap_or_else(|| format!("island-{}", island[bus])),
                })
            }
            schema::DeviceModelEntry::ConstPowerLoad { p, q } => {
                if kind != BusKind::Ac {
                    return Err(CaseError::Topology(format!(
                        "{what}: constant-power loads attach to AC buses (use dc_power on DC)"
                    )));
                }
                DeviceModel::ConstPowerLoad { p: *p, q: *q }
            }
            schema::DeviceModelEntry::ConstImpedanceLoad { g, b } => {
                if kind == BusKind::Dc && *b != 0.0 {
                    return Err(CaseError::Schema(format!("{what}: DC impedance load takes no susceptance")));
                }
                DeviceModel::ConstImpedanceLoad { y: Complex64::new(*g, *b) }
            }
            schema::DeviceModelEntry::DcPower { p } => {
                if kind != BusKind::Dc {
                    return Err(CaseError::Topology(format!("{what}: dc_power attaches to DC buses")));
                }
                DeviceModel::DcPower { p: *p }
            }
            schema::DeviceModelEntry::DcVoltageSource { v_ref, kp, ki } => {
                if kind != BusKind::Dc {
                    return Err(CaseError::Topology(format!("{what}: dc_voltage_source attaches to DC buses")));
                }
                if *v_ref <= 0.0 {
                    return Err(CaseError::Unit(format!("{what}: v_ref must be positive")));
                }
                DeviceModel::DcVoltageSource { v_ref: *v_ref, kp: *kp, ki: *ki }
            }
        };
        devices.push(Device { id: d.id.clone(), bus, model });
    }

    // One slack per AC island, one voltage-controlling element per DC island.
    let mut ac_slack = BTreeMap::new();
    let mut dc_ctrl = BTreeMap::new();
    for (i, b) in buses.iter().enumerate() {
        match b.kind {
            BusKind::Ac => {
                ac_slack.entry(island[i]).or_insert(0);
            }
            BusKind::Dc => {
                dc_ctrl.entry(island[i]).or_insert(0);
            }
        }
    }
    for d in &devices {
        match &d.model {
            DeviceModel::Machine(m) if matches!(m.pf, MachinePf::Slack { .. }) => {
                *ac_slack.get_mut(&island[d.bus]).unwrap() += 1;
            }
            DeviceModel::DcVoltageSource { .. } => {
                *dc_ctrl.get_mut(&island[d.bus]).unwrap() += 1;
            }
            _ => {}
        }
    }
    for br in &branches {
        if let BranchModel::Converter { control, .. } = &br.model {
            if control.d_mode == DMode::VDc {
                let dc_bus = br.to.bus().unwrap();
                *dc_ctrl.get_mut(&island[dc_bus]).unwrap() += 1;
            }
        }
    }
    for (isl, count) in &ac_slack {
        if *count != 1 {
            return Err(CaseError::Topology(format!(
                "AC island {isl} needs exactly one slack machine, found {count}"
            )));
        }
    }
    for (isl, count) in &dc_ctrl {
        if *count != 1 {
            return Err(CaseError::Topology(format!(
                "DC island {isl} needs exactly one voltage-controlling element, found {count}"
            )));
        }
    }

    let mut machine_bus = BTreeSet::new();
    for d in &devices {
        if matches!(d.model, DeviceModel::Machine(_)) && !machine_bus.insert(d.bus) {
            return Err(CaseError::Topology(format!(
                "bus {:?} has more than one machine",
                buses[d.bus].id
            )));
        }
    }
    // Frequency-mode converters measure the inertial frequency of their AC
    // island, which needs at least one machine to define it. And a machine
    // already regulates its own bus voltage, so a v_ac converter there
    // would fight it.
    for br in &branches {
        if let BranchModel::Converter { control, .. } = &br.model {
            if control.d_mode == DMode::FAc
                && !machine_bus.iter().any(|&b| island[b] == island[br.from])
            {
                return Err(CaseError::Topology(format!(
                    "branch {:?}: f_ac control needs a machine in the converter's AC island",
                    br.id
                )));
            }
            if control.q_mode == QMode::VAc && machine_bus.contains(&br.from) {
                return Err(CaseError::Topology(format!(
                    "branch {:?}: v_ac control clashes with the machine at bus {:?}",
                    br.id, buses[br.from].id
                )));
            }
        }
    }

    // A DC bus touched only by series inductors has no equation tying its
    // voltage to anything the instant those currents are frozen, so demand
    // some voltage-dependent attachment at every DC bus.
    for (b, bus) in buses.iter().enumerate() {
        if bus.kind != BusKind::Dc {
            continue;
        }
        let anchored_el = elements.iter().any(|e| {
            let incident = e.from == b || e.to == Terminal::Bus(b);
            incident
                && match e.kind {
                    ElementKind::StaticY { .. } | ElementKind::ShuntGc { .. } => true,
                    ElementKind::Converter { .. } => e.to == Terminal::Bus(b),
                    _ => false,
                }
        });
        let anchored_dev = devices.iter().any(|d| {
            d.bus == b
                && matches!(
                    d.model,
                    DeviceModel::DcPower { .. }
                        | DeviceModel::DcVoltageSource { .. }
                        | DeviceModel::ConstImpedanceLoad { .. }
                )
        });
        if !anchored_el && !anchored_dev {
            return Err(CaseError::Topology(format!(
                "DC bus {:?} connects only to series RL elements; add a shunt, converter or device",
                bus.id
            )));
        }
    }

    let branch_pos: BTreeMap<&str, usize> =
        branches.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
    let device_pos: BTreeMap<&str, usize> =
        devices.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let mut events = Vec::new();
    for ev in &file.events {
        if ev.t <= 0.0 {
            return Err(CaseError::Schema(format!(
                "event at t={}: events must occur after the start",
                ev.t
            )));
        }
        let (action, target) = match ev.action {
            schema::EventActionEntry::DisconnectBranch => {
                let idx = branch_pos.get(ev.target.as_str()).ok_or_else(|| {
                    CaseError::Schema(format!("event targets unknown branch {:?}", ev.target))
                })?;
                let switchable = elements
                    .iter()
                    .filter(|e| e.branch == *idx)
                    .all(|e| {
                        matches!(
                            e.kind,
                            ElementKind::StaticY { .. } | ElementKind::SeriesRl { .. }
                        )
                    });
                if !switchable {
                    return Err(CaseError::Schema(format!(
                        "event targets branch {:?}: only static and series RL branches are switchable",
                        ev.target
                    )));
                }
                (EventAction::DisconnectBranch, *idx)
            }
            schema::EventActionEntry::DisconnectDevice => {
                let idx = device_pos.get(ev.target.as_str()).ok_or_else(|| {
                    CaseError::Schema(format!("event targets unknown device {:?}", ev.target))
                })?;
                (EventAction::DisconnectDevice, *idx)
            }
        };
        if events.iter().any(|e: &Event| e.action == action && e.target == target) {
            return Err(CaseError::Schema(format!("duplicate event for target {:?}", ev.target)));
        }
        events.push(Event { t: ev.t, action, target });
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));

    let mut agc = Vec::new();
    for a in &file.agc {
        let mut participation = Vec::new();
        let mut total = 0.0;
        for (id, w) in &a.participation {
            let idx = device_pos.get(id.as_str()).ok_or_else(|| {
                CaseError::Schema(format!("agc references unknown device {id:?}"))
            })?;
            if !matches!(devices[*idx].model, DeviceModel::Machine(_)) {
                return Err(CaseError::Schema(format!("agc participant {id:?} is not a machine")));
            }
            if *w <= 0.0 {
                return Err(CaseError::Unit(format!("agc participation for {id:?} must be positive")));
            }
            participation.push((*idx, *w));
            total += *w;
        }
        if participation.is_empty() {
            return Err(CaseError::Schema(format!("agc for area {:?} has no participants", a.area)));
        }
        for p in &mut participation {
            p.1 /= total;
        }
        agc.push(AgcScheme { area: a.area.clone(), ki: a.ki, participation });
    }

    Ok(NetworkCase {
        name: file.name.unwrap_or_default(),
        base_mva: file.base_mva,
        f_nom_hz: file.f_nom_hz,
        omega_nom,
        buses,
        branches,
        elements,
        devices,
        events,
        agc,
        bus_index,
        island,
        n_islands,
    })
}

/// Sparse complex bus matrix in the sign convention described at module
/// level. Deterministic iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct YBus {
    pub n: usize,
    entries: BTreeMap<(usize, usize), Complex64>,
}

impl YBus {
    pub fn new(n: usize) -> Self {
        Self { n, entries: BTreeMap::new() }
    }

    pub fn add(&mut self, row: usize, col: usize, v: Complex64) {
        if v != Complex64::new(0.0, 0.0) {
            *self.entries.entry((row, col)).or_insert(Complex64::new(0.0, 0.0)) += v;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries.get(&(row, col)).copied().unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        self.entries.iter().map(|(&(r, c), &v)| (r, c, v))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<Complex64> {
        let mut m = nalgebra::DMatrix::from_element(self.n, self.n, Complex64::new(0.0, 0.0));
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    /// `Y * v`, with ground treated as zero volts.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (r, c, y) in self.iter() {
            out[r] += y * v[c];
        }
        out
    }
}

/// Instantaneous admittance state for every dynamic element, plus the set of
/// disconnected element ids.
#[derive(Debug, Clone, Default)]
pub struct BranchStates {
    pub dynamic: BTreeMap<String, BranchCfState>,
    pub disabled: BTreeSet<String>,
}

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("dynamic element {0:?} has no supplied state")]
    MissingState(String),
    #[error("element {0:?}: scalar state supplied for a two-port block")]
    ShapeMismatch(String),
}

/// Assembles the bus admittance matrix at one instant.
///
/// Static elements contribute their constant admittance; every dynamic
/// element must appear in `states.dynamic`. Shunt elements add only a
/// diagonal term (negative, per the sign convention). Two-port blocks
/// (transformers, converters) are placed exactly as supplied.
pub fn assemble_admittance(
    case: &NetworkCase,
    states: &BranchStates,
) -> Result<YBus, AssemblyError> {
    let mut y = YBus::new(case.buses.len());
    for e in &case.elements {
        if states.disabled.contains(&e.id) {
            continue;
        }
        let block = match &e.kind {
            ElementKind::StaticY { y } => Block2::symmetric(*y),
            _ => {
                let st = states
                    .dynamic
                    .get(&e.id)
                    .ok_or_else(|| AssemblyError::MissingState(e.id.clone()))?;
                match (&st.y, &e.kind) {
                    (YNow::Scalar(y), _) => Block2::symmetric(*y),
                    (YNow::Block(b), ElementKind::Transformer { .. })
                    | (YNow::Block(b), ElementKind::Converter { .. }) => *b,
                    (YNow::Block(_), _) => {
                        return Err(AssemblyError::ShapeMismatch(e.id.clone()));
                    }
                }
            }
        };
        y.add(e.from, e.from, block.ff);
        if let Terminal::Bus(to) = e.to {
            y.add(to, to, block.tt);
            y.add(e.from, to, block.ft);
            y.add(to, e.from, block.tf);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::steady_branch_states;

    fn two_bus_case(extra: &str) -> String {
        format!(
            r#"{{
            "base_mva": 100.0, "f_nom_hz": 50.0,
            "buses": [
                {{"id": "a", "kind": "ac", "base_kv": 230.0}},
                {{"id": "b", "kind": "ac", "base_kv": 230.0}}
            ],
            "branches": [
                {{"id": "ab", "from": "a", "to": "b", "model": {{"type": "constant_y", "g": 1.0, "b": -5.0}}}}
            ],
            "devices": [
                {{"id": "g1", "bus": "a", "model": {{"type": "machine", "h": 3.0, "xd": 1.0, "xq": 0.8, "xd1": 0.3, "xq1": 0.4, "td01": 6.0, "tq01": 0.5, "pf": {{"mode": "slack", "v_set": 1.0}}}}}}
            ]{extra}
        }}"#
        )
    }

    #[test]
    fn parses_minimal_case() {
        let case = parse_case(&two_bus_case("")).unwrap();
        assert_eq!(case.n_buses(), 2);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.elements.len(), 1);
        assert_eq!(case.devices.len(), 1);
        assert_eq!(case.n_islands, 1);
    }

    #[test]
    fn two_bus_assembly_sign_convention() {
        // One constant branch y = 1 - 5j: off-diagonals are +y, diagonals -y.
        let case = parse_case(&two_bus_case("")).unwrap();
        let y = assemble_admittance(&case, &steady_branch_states(&case)).unwrap();
        let yb = Complex64::new(1.0, -5.0);
        assert_eq!(y.get(0, 0), -yb);
        assert_eq!(y.get(1, 1), -yb);
        assert_eq!(y.get(0, 1), yb);
        assert_eq!(y.get(1, 0), yb);
    }

    #[test]
    fn assembly_is_linear_in_branches() {
        // Removing a branch subtracts exactly its block.
        let with = r#",
            "events": []"#;
        let case = parse_case(&two_bus_case(with)).unwrap();
        let states = steady_branch_states(&case);
        let full = assemble_admittance(&case, &states).unwrap();
        let mut disabled = states.clone();
        disabled.disabled.insert("ab".into());
        let removed = assemble_admittance(&case, &disabled).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect = if r == c {
                    -Complex64::new(1.0, -5.0)
                } else {
                    Complex64::new(1.0, -5.0)
                };
                assert_eq!(full.get(r, c) - removed.get(r, c), expect);
            }
        }
    }

    #[test]
    fn rejects_duplicate_bus() {
        let json = r#"{
            "base_mva": 100.0, "f_nom_hz": 50.0,
            "buses": [
                {"id": "a", "kind": "ac", "base_kv": 230.0},
                {"id": "a", "kind": "ac", "base_kv": 230.0}
            ],
            "branches": []
        }"#;
        match parse_case(json) {
            Err(CaseError::Schema(msg)) => assert!(msg.contains("duplicate bus"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_bus_reference() {
        let json = two_bus_case("").replace("\"to\": \"b\"", "\"to\": \"zz\"");
        match parse_case(&json) {
            Err(CaseError::Schema(msg)) => assert!(msg.contains("unknown bus"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_base() {
        let json = two_bus_case("").replace("\"base_mva\": 100.0", "\"base_mva\": -1.0");
        match parse_case(&json) {
            Err(CaseError::Unit(msg)) => assert!(msg.contains("base_mva"), "{msg}"),
            other => panic!("expected unit error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_mixed_kind_line() {
        let json = two_bus_case("").replace(
            r#"{"id": "b", "kind": "ac""#,
            r#"{"id": "b", "kind": "dc""#,
        );
        match parse_case(&json) {
            Err(CaseError::Topology(msg)) => assert!(msg.contains("mix"), "{msg}"),
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_slack() {
        let json = two_bus_case("").replace("slack", "pv").replace(
            "\"v_set\": 1.0",
            "\"p_set\": 0.5, \"v_set\": 1.0",
        );
        match parse_case(&json) {
            Err(CaseError::Topology(msg)) => assert!(msg.contains("slack"), "{msg}"),
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_event_target() {
        let json = two_bus_case(
            r#", "events": [{"t": 1.0, "action": "disconnect_branch", "target": "nope"}]"#,
        );
        match parse_case(&json) {
            Err(CaseError::Schema(msg)) => assert!(msg.contains("unknown branch"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_event_at_start() {
        let json = two_bus_case(
            r#", "events": [{"t": 0.0, "action": "disconnect_branch", "target": "ab"}]"#,
        );
        match parse_case(&json) {
            Err(CaseError::Schema(msg)) => assert!(msg.contains("after the start"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_switching_a_transformer() {
        let json = two_bus_case(
            r#", "events": [{"t": 1.0, "action": "disconnect_branch", "target": "ab"}]"#,
        )
        .replace(
            r#"{"type": "constant_y", "g": 1.0, "b": -5.0}"#,
            r#"{"type": "transformer", "r": 0.01, "x": 0.1}"#,
        );
        match parse_case(&json) {
            Err(CaseError::Schema(msg)) => assert!(msg.contains("switchable"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    fn dc_pair_case(extra_branch: &str, extra_device: &str) -> String {
        format!(
            r#"{{
            "base_mva": 100.0, "f_nom_hz": 50.0,
            "buses": [
                {{"id": "d1", "kind": "dc", "base_kv": 350.0}},
                {{"id": "d2", "kind": "dc", "base_kv": 350.0}}
            ],
            "branches": [
                {{"id": "cable", "from": "d1", "to": "d2", "model": {{"type": "series_rl", "r": 0.01, "l": 0.002}}}}{extra_branch}
            ],
            "devices": [
                {{"id": "src", "bus": "d1", "model": {{"type": "dc_voltage_source", "v_ref": 1.0, "kp": 10.0, "ki": 100.0}}}}{extra_device}
            ]
        }}"#
        )
    }

    #[test]
    fn rejects_dc_bus_with_only_series_inductors() {
        // d2 sees nothing but the cable inductance: its voltage would be
        // undetermined the moment that current is frozen.
        match parse_case(&dc_pair_case("", "")) {
            Err(CaseError::Topology(msg)) => assert!(msg.contains("series RL"), "{msg}"),
            other => panic!("expected topology error, got {other:?}"),
        }
        let with_cap = dc_pair_case(
            r#",
                {"id": "cap", "from": "d2", "to": "ground", "model": {"type": "shunt_gc", "g": 0.0, "c": 0.01}}"#,
            "",
        );
        parse_case(&with_cap).unwrap();
        let with_load = dc_pair_case(
            "",
            r#",
                {"id": "load", "bus": "d2", "model": {"type": "dc_power", "p": -0.5}}"#,
        );
        parse_case(&with_load).unwrap();
    }

    #[test]
    fn ac_pi_line_expands_to_constant_elements() {
        let json = two_bus_case("").replace(
            r#"{"type": "constant_y", "g": 1.0, "b": -5.0}"#,
            r#"{"type": "pi_line", "r": 0.01, "x": 0.1, "b": 0.2}"#,
        );
        let case = parse_case(&json).unwrap();
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.elements.len(), 3);
        assert!(case.elements.iter().all(|e| !e.kind.is_dynamic()));
        // Series admittance at nominal frequency plus one shunt leg per end.
        let y = assemble_admittance(&case, &BranchStates::default()).unwrap();
        let ys = Complex64::new(0.01, 0.1).inv();
        let ysh = Complex64::new(0.0, 0.1);
        assert!((y.get(0, 1) - ys).norm() < 1e-12);
        assert!((y.get(0, 0) + ys + ysh).norm() < 1e-12);
    }

    #[test]
    fn empty_bus_list_is_a_schema_error() {
        let json = r#"{"base_mva": 100.0, "f_nom_hz": 50.0, "buses": [], "branches": []}"#;
        assert!(matches!(parse_case(json), Err(CaseError::Schema(_))));
    }

    #[test]
    fn event_windows() {
        let json = two_bus_case(
            r#", "events": [{"t": 1.0, "action": "disconnect_branch", "target": "ab"}]"#,
        );
        let case = parse_case(&json).unwrap();
        assert!(case.branch_active(0, 0.999));
        assert!(!case.branch_active(0, 1.0));
        assert!(!case.element_active(0, 2.0));
    }
}
