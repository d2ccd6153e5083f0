//! Serde-facing case file schema.
//!
//! The on-disk format is deliberately close to how grid data is usually
//! written down: AC branch impedances in per-unit resistance/reactance at
//! nominal frequency, DC branch parameters as physical per-unit R (pu),
//! L (pu*s), and C (pu*s). [`super::parse_case`] converts everything to the
//! canonical internal representation.
//!
//! `comment` fields are accepted anywhere an author may want a note (the
//! schema otherwise rejects unknown keys) and are dropped on parse.
#![allow(dead_code)]

use serde::Deserialize;
use std::collections::BTreeMap;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub name: Option<String>,
    pub comment: Option<String>,
    pub base_mva: f64,
    pub f_nom_hz: f64,
    pub buses: Vec<BusEntry>,
    pub branches: Vec<BranchEntry>,
    #[serde(default)]
    pub devices: Vec<DeviceEntry>,
    #[serde(default)]
    pub events: Vec<EventEntry>,
    #[serde(default)]
    pub agc: Vec<AgcEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    pub id: String,
    pub kind: BusKindEntry,
    pub base_kv: f64,
    /// Initial voltage magnitude guess, pu.
    #[serde(default = "one")]
    pub v0: f64,
    /// Initial voltage angle guess, rad. Must be omitted or zero on DC buses.
    #[serde(default)]
    pub theta0: f64,
    pub comment: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKindEntry {
    Ac,
    Dc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchEntry {
    pub id: String,
    pub from: String,
    /// Bus id, or the reserved terminal `"ground"` for shunt elements.
    pub to: String,
    pub model: BranchModelEntry,
    pub comment: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchModelEntry {
    /// Constant admittance. Give either (g, b) pu admittance or (r, x) pu
    /// impedance, not both.
    ConstantY {
        g: Option<f64>,
        b: Option<f64>,
        r: Option<f64>,
        x: Option<f64>,
    },
    /// Dynamic series RL element. `l` is pu*s; `x` pu reactance at nominal
    /// frequency may be given instead.
    SeriesRl {
        #[serde(default)]
        r: f64,
        l: Option<f64>,
        x: Option<f64>,
    },
    /// Dynamic parallel GC element. `c` is pu*s; `b` pu susceptance at
    /// nominal frequency may be given instead.
    ShuntGc {
        #[serde(default)]
        g: f64,
        c: Option<f64>,
        b: Option<f64>,
    },
    /// Pi-section line: series RL plus half the shunt capacitance at each
    /// end. Between AC buses it enters the network as constant admittances
    /// evaluated at nominal frequency; between DC buses it expands to
    /// dynamic RL and C elements.
    PiLine {
        #[serde(default)]
        r: f64,
        l: Option<f64>,
        x: Option<f64>,
        c_half: Option<f64>,
        b: Option<f64>,
    },
    /// Regulating transformer. `from` is the unit-ratio side, `to` the
    /// regulated side. Series impedance as (r, x) or admittance (g, b).
    Transformer {
        g: Option<f64>,
        b: Option<f64>,
        r: Option<f64>,
        x: Option<f64>,
        #[serde(default = "one")]
        m0: f64,
        #[serde(default)]
        alpha0: f64,
        control: Option<TransformerControlEntry>,
    },
    /// Averaged AC/DC converter. `from` must be an AC bus, `to` a DC bus.
    /// (r, x) or (g, b) give the AC-side filter admittance.
    Converter {
        g: Option<f64>,
        b: Option<f64>,
        r: Option<f64>,
        x: Option<f64>,
        control: ConverterControlEntry,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerControlEntry {
    /// Voltage magnitude reference for the tap-side (`to`) bus, pu. A PI
    /// loop drives the tap toward it; when omitted, the loop holds whatever
    /// voltage the power flow produced.
    pub v_ref: Option<f64>,
    #[serde(default = "tf_kp")]
    pub kp: f64,
    #[serde(default = "tf_ki")]
    pub ki: f64,
    /// Tap actuator lag, s.
    #[serde(default = "tf_lag")]
    pub t_actuator: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterControlEntry {
    pub d_mode: DModeEntry,
    pub q_mode: QModeEntry,
    /// Scheduled AC-side active-power injection, pu (power-flow setpoint for
    /// every d-mode except `v_dc`).
    pub p_sched: Option<f64>,
    /// DC-voltage reference, pu (`v_dc` mode).
    pub v_dc_ref: Option<f64>,
    /// AC-voltage magnitude reference, pu (`v_ac` mode).
    pub v_ac_ref: Option<f64>,
    /// Scheduled AC-side reactive injection, pu (`q_ac` mode).
    pub q_sched: Option<f64>,
    /// Frequency reference, pu of nominal (`f_ac` mode).
    #[serde(default = "one")]
    pub f_ref: f64,
    #[serde(default = "cv_kp")]
    pub kp_d: f64,
    #[serde(default = "cv_ki")]
    pub ki_d: f64,
    #[serde(default = "cv_kp")]
    pub kp_q: f64,
    #[serde(default = "cv_ki")]
    pub ki_q: f64,
    /// Modulation actuator lag, s.
    #[serde(default = "cv_lag")]
    pub t_actuator: f64,
    #[serde(default = "m_min_default")]
    pub m_min: f64,
    #[serde(default = "m_max_default")]
    pub m_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DModeEntry {
    VDc,
    FAc,
    PAc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QModeEntry {
    VAc,
    QAc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    pub id: String,
    pub bus: String,
    pub model: DeviceModelEntry,
    pub comment: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceModelEntry {
    /// Two-axis synchronous machine with first-order governor and AVR.
    Machine {
        h: f64,
        #[serde(default)]
        d: f64,
        xd: f64,
        xq: f64,
        xd1: f64,
        xq1: f64,
        td01: f64,
        tq01: f64,
        #[serde(default)]
        ra: f64,
        pf: MachinePfEntry,
        governor: Option<GovernorEntry>,
        avr: Option<AvrEntry>,
        /// COI area label; defaults to a per-island label.
        area: Option<String>,
    },
    /// Constant-power load; `p`, `q` are consumed powers (positive = load).
    ConstPowerLoad { p: f64, q: f64 },
    /// Constant-impedance load; admittance consumed at the bus, pu.
    ConstImpedanceLoad {
        #[serde(default)]
        g: f64,
        #[serde(default)]
        b: f64,
    },
    /// Constant-power DC injection (positive injects into the bus).
    DcPower { p: f64 },
    /// PI-regulated DC current source holding its bus voltage; acts as the
    /// DC slack.
    DcVoltageSource {
        v_ref: f64,
        #[serde(default = "dcs_kp")]
        kp: f64,
        #[serde(default = "dcs_ki")]
        ki: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MachinePfEntry {
    Slack { v_set: f64 },
    Pv { p_set: f64, v_set: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorEntry {
    /// Speed droop, pu frequency per pu power.
    pub r_droop: f64,
    #[serde(default = "gov_lag")]
    pub t_g: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvrEntry {
    pub ka: f64,
    #[serde(default = "avr_lag")]
    pub ta: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    pub t: f64,
    pub action: EventActionEntry,
    pub target: String,
    pub comment: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventActionEntry {
    DisconnectBranch,
    DisconnectDevice,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgcEntry {
    pub area: String,
    pub ki: f64,
    /// Machine id -> participation factor; factors are normalized to sum 1.
    pub participation: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}
fn tf_kp() -> f64 {
    0.1
}
fn tf_ki() -> f64 {
    1.0
}
fn tf_lag() -> f64 {
    0.05
}
fn cv_kp() -> f64 {
    0.5
}
fn cv_ki() -> f64 {
    20.0
}
fn cv_lag() -> f64 {
    0.02
}
fn m_min_default() -> f64 {
    0.2
}
fn m_max_default() -> f64 {
    1.6
}
fn dcs_kp() -> f64 {
    20.0
}
fn dcs_ki() -> f64 {
    2000.0
}
fn gov_lag() -> f64 {
    0.5
}
fn avr_lag() -> f64 {
    0.05
}
