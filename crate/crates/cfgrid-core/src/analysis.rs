//! Per-bus decomposition of the voltage CF into branch-rate, neighbor and
//! injection contributions, and audits of its exactness over trajectories.
//!
//! Differentiating the KCL row of bus `h` in time and dividing by
//! `v_h Y_hh` expresses the voltage CF as a weighted sum of the CFs of its
//! inputs:
//!
//! `eta_h = sum_e c_chi_e chi_e + sum_k c_eta_k eta_k + c_xi xi_h`
//!
//! where `e` runs over incident elements (one term per parallel branch),
//! `k` over neighbor buses, and `xi_h` is the CF of the current injected
//! by devices at `h`. The weights have closed forms:
//!
//! `c_chi_e = i_he / (v_h Y_hh)`, with `i_he` the current the bus feeds
//! into element `e`; `c_eta_k = -v_k Y_hk / (v_h Y_hh)`; and
//! `c_xi = -i_h / (v_h Y_hh)` with `i_h` the net device injection. Two
//! bookkeeping identities follow from the same row and hold at any
//! operating point:
//!
//! * `sum_k c_eta_k + c_xi = 1`
//! * `sum_e c_chi_e = -c_xi`
//!
//! [`compute_coefficients`] evaluates the weights from voltages and
//! element admittance blocks, [`steady_coefficients`] does so at a power
//! flow solution, and [`audit_trajectory`] replays a simulation, rebuilds
//! every term from the recorded channels, and compares the reconstructed
//! `eta` against an independent numerical CF estimate of the voltage
//! samples themselves.
//!
//! The audit evaluates each branch term in product form, weight times CF
//! expanded so shared factors cancel. A series RL element whose branch
//! voltage `R i + L di/dt` crosses zero has a genuinely diverging `chi`,
//! but its weight vanishes at the same rate and the expanded term, like
//! the neighbor weights, stays finite and numerically stable because the
//! same cancelling value appears in numerator and denominator. What does
//! not survive is the branch flow itself: inside a narrow cancellation
//! band the reconstructed flow inherits amplified rounding noise that the
//! sampled derivative of the injected current then magnifies by `1/dt`.
//! Samples in that band (and their stencil neighbors) are flagged,
//! excluded from the audit statistics, and reported; all zero crossings
//! are reported as well, flagged or not.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::branches::{
    converter_admittance_block, converter_chi_block, transformer_admittance_block,
    transformer_chi_block, Block2, CfValue, ConverterOperatingPoint, YNow,
};
use crate::cf::{self, ComplexFrequency, ComplexSignal, EPS_MAG, EPS_SING};
use crate::dynamics::Trajectory;
use crate::network::{BranchStates, ElementKind, EventAction, NetworkCase, Terminal};
use crate::powerflow::{solution_branch_states, PfSolution};

/// Relative half-width of the cancellation band around a series RL
/// element's branch-voltage zero, `|R i + L di/dt|` against the term
/// magnitudes. Inside the band the reconstructed branch flow amplifies
/// rounding and solver residue enough to corrupt the `1/dt`-scaled
/// injected-current derivative at neighboring samples.
const RL_CANCEL_REL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    /// Voltage and current magnitudes at or below this are treated as zero.
    pub eps_mag: f64,
    /// Admittance magnitudes at or below this are treated as singular.
    pub eps_sing: f64,
    /// Restrict decomposition output to these buses; `None` covers all.
    pub buses: Option<BTreeSet<String>>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self { eps_mag: EPS_MAG, eps_sing: EPS_SING, buses: None }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("bus {bus} is singular: {reason}")]
    SingularBus { bus: usize, reason: String },
    #[error("element {0:?} has no admittance state")]
    MissingState(String),
    #[error("trajectory has no channel {0:?}; it was not recorded from this case")]
    MissingChannel(String),
    #[error("unknown bus {0:?}")]
    UnknownBus(String),
    #[error("{0}")]
    BadTrajectory(String),
}

/// One element's terminals and instantaneous admittance block, the form
/// the coefficient computation consumes. Scalar elements use
/// [`Block2::symmetric`]; for ground shunts only the `ff` entry lands.
#[derive(Debug, Clone, Copy)]
pub struct ElementView<'a> {
    pub id: &'a str,
    pub from: usize,
    pub to: Terminal,
    pub block: Block2,
}

/// Decomposition weights of one bus at one instant.
#[derive(Debug, Clone)]
pub struct Coefficients {
    /// Element id -> weight of that element's admittance CF.
    pub c_chi: BTreeMap<String, Complex64>,
    /// Neighbor bus index -> weight of that bus's voltage CF.
    pub c_eta: BTreeMap<usize, Complex64>,
    /// Weight of the injected-current CF.
    pub c_xi: Complex64,
    /// Diagonal admittance the division used.
    pub y_hh: Complex64,
}

/// Full decomposition record of one bus at one sample: weights, the CF
/// values they multiply, the reconstructed voltage CF, and the direct
/// numerical estimate it is checked against. Undefined CFs carry NaN
/// components; `flagged` marks rows excluded from audit statistics.
#[derive(Debug, Clone)]
pub struct CfDecomposition {
    pub bus: String,
    pub time: f64,
    pub c_chi: BTreeMap<String, Complex64>,
    pub c_eta: BTreeMap<String, Complex64>,
    pub c_xi: Complex64,
    pub chi: BTreeMap<String, ComplexFrequency>,
    pub eta_neighbors: BTreeMap<String, ComplexFrequency>,
    pub xi: ComplexFrequency,
    pub eta_reconstructed: ComplexFrequency,
    pub eta_direct: ComplexFrequency,
    pub flagged: bool,
    pub flag_reasons: Vec<String>,
}

impl CfDecomposition {
    /// `|sum c_eta + c_xi - 1|`; zero up to rounding by construction.
    pub fn neighbor_sum_residual(&self) -> f64 {
        let sum: Complex64 = self.c_eta.values().sum();
        (sum + self.c_xi - Complex64::new(1.0, 0.0)).norm()
    }

    /// `|sum c_chi + c_xi|`; zero up to rounding by construction.
    pub fn branch_sum_residual(&self) -> f64 {
        let sum: Complex64 = self.c_chi.values().sum();
        (sum + self.c_xi).norm()
    }

    /// `|sum c_chi - c_xi|`, the sign-free reading of the branch-sum
    /// identity. Nonzero wherever `c_xi` itself is; reported so both
    /// conventions stay visible.
    pub fn branch_sum_gap(&self) -> f64 {
        let sum: Complex64 = self.c_chi.values().sum();
        (sum - self.c_xi).norm()
    }

    pub fn reconstruction_error(&self) -> f64 {
        (self.eta_reconstructed.as_complex() - self.eta_direct.as_complex()).norm()
    }
}

/// CF of a diagonal admittance entry, derived from the off-diagonal CFs.
#[derive(Debug, Clone, Copy)]
pub struct ChiHH {
    pub value: ComplexFrequency,
}

/// Per-neighbor split of a coefficient into like-to-like coupling
/// (amplitude rate to amplitude rate, frequency to frequency) and the
/// cross coupling between the two.
#[derive(Debug, Clone)]
pub struct CouplingMetric {
    pub neighbor: String,
    pub direct: f64,
    pub cross: f64,
    /// `direct / cross`; infinite when the cross coupling is exactly zero.
    pub ratio: f64,
}

fn from_flow(b: &Block2, vf: Complex64, vt: Complex64) -> Complex64 {
    -(b.ff * vf + b.ft * vt)
}

fn to_flow(b: &Block2, vf: Complex64, vt: Complex64) -> Complex64 {
    -(b.tf * vf + b.tt * vt)
}

/// Current bus `h` feeds into element `e`; `None` when not incident.
fn element_flow(e: &ElementView, h: usize, v: &[Complex64]) -> Option<Complex64> {
    let vt = match e.to {
        Terminal::Bus(k) => v[k],
        Terminal::Ground => Complex64::new(0.0, 0.0),
    };
    if e.from == h {
        Some(from_flow(&e.block, v[e.from], vt))
    } else if e.to == Terminal::Bus(h) {
        Some(to_flow(&e.block, v[e.from], vt))
    } else {
        None
    }
}

/// Net current the elements feed into bus `h`, accumulated element by
/// element. Equals the device injection at `h` when KCL holds.
pub fn kcl_injection(h: usize, v: &[Complex64], elements: &[ElementView]) -> Complex64 {
    let mut inj = Complex64::new(0.0, 0.0);
    for e in elements {
        if let Some(flow) = element_flow(e, h, v) {
            inj += flow;
        }
    }
    inj
}

/// Decomposition weights of bus `h` from instantaneous voltages, element
/// blocks, and the net injected current. `c_chi` carries one entry per
/// incident element, so parallel branches keep distinct weights.
pub fn compute_coefficients(
    h: usize,
    v: &[Complex64],
    elements: &[ElementView],
    injection: Complex64,
    opts: &AnalysisOptions,
) -> Result<Coefficients, AnalysisError> {
    let vh = v[h];
    if !(vh.norm() > opts.eps_mag) {
        return Err(AnalysisError::SingularBus {
            bus: h,
            reason: format!(
                "voltage magnitude {:.3e} at or below the {:.3e} guard",
                vh.norm(),
                opts.eps_mag
            ),
        });
    }
    let mut y_hh = Complex64::new(0.0, 0.0);
    for e in elements {
        if e.from == h {
            y_hh += e.block.ff;
        }
        if e.to == Terminal::Bus(h) {
            y_hh += e.block.tt;
        }
    }
    if !(y_hh.norm() > opts.eps_sing) {
        return Err(AnalysisError::SingularBus {
            bus: h,
            reason: format!(
                "diagonal admittance magnitude {:.3e} at or below the {:.3e} guard",
                y_hh.norm(),
                opts.eps_sing
            ),
        });
    }
    let den = vh * y_hh;

    let mut c_chi = BTreeMap::new();
    let mut y_row: BTreeMap<usize, Complex64> = BTreeMap::new();
    for e in elements {
        let Some(flow) = element_flow(e, h, v) else { continue };
        c_chi.insert(e.id.to_string(), flow / den);
        if e.from == h {
            if let Terminal::Bus(k) = e.to {
                *y_row.entry(k).or_insert_with(|| Complex64::new(0.0, 0.0)) += e.block.ft;
            }
        } else {
            *y_row.entry(e.from).or_insert_with(|| Complex64::new(0.0, 0.0)) += e.block.tf;
        }
    }
    let c_eta = y_row.into_iter().map(|(k, y)| (k, -v[k] * y / den)).collect();
    Ok(Coefficients { c_chi, c_eta, c_xi: -injection / den, y_hh })
}

/// CF of the diagonal entry of bus `h` given the incident off-diagonal
/// admittances and their CFs: `-sum_k Y_hk chi_hk / Y_hh`. Zero when all
/// branch CFs are zero; equal to the branch CF when a single branch is
/// incident.
pub fn compute_chi_hh(
    h: usize,
    y_hh: Complex64,
    branches: &[(Complex64, Complex64)],
    eps_sing: f64,
) -> Result<ChiHH, AnalysisError> {
    if !(y_hh.norm() > eps_sing) {
        return Err(AnalysisError::SingularBus {
            bus: h,
            reason: format!(
                "diagonal admittance magnitude {:.3e} at or below the {:.3e} guard",
                y_hh.norm(),
                eps_sing
            ),
        });
    }
    let mut sum = Complex64::new(0.0, 0.0);
    for (y, chi) in branches {
        sum += y * chi;
    }
    Ok(ChiHH { value: ComplexFrequency::from_complex(-sum / y_hh) })
}

/// Literal evaluation of the decomposition sum. Terms with an exactly
/// zero weight are dropped, so undefined CFs of idle inputs cannot poison
/// the result; a nonzero weight paired with a missing or NaN CF yields
/// NaN.
pub fn reconstruct_eta(
    c: &Coefficients,
    chi: &BTreeMap<String, ComplexFrequency>,
    eta_neighbors: &BTreeMap<usize, ComplexFrequency>,
    xi: ComplexFrequency,
) -> ComplexFrequency {
    let zero = Complex64::new(0.0, 0.0);
    let mut sum = zero;
    for (id, &w) in &c.c_chi {
        if w == zero {
            continue;
        }
        match chi.get(id) {
            Some(x) => sum += w * x.as_complex(),
            None => return ComplexFrequency::nan(),
        }
    }
    for (k, &w) in &c.c_eta {
        if w == zero {
            continue;
        }
        match eta_neighbors.get(k) {
            Some(x) => sum += w * x.as_complex(),
            None => return ComplexFrequency::nan(),
        }
    }
    if c.c_xi != zero {
        sum += c.c_xi * xi.as_complex();
    }
    ComplexFrequency::from_complex(sum)
}

/// Splits every neighbor weight of a decomposition row into `|Re|` (the
/// like-to-like coupling) and `|Im|` (the amplitude-frequency cross
/// coupling), with their ratio.
pub fn coupling_metrics(d: &CfDecomposition) -> Vec<CouplingMetric> {
    d.c_eta
        .iter()
        .map(|(k, c)| {
            let direct = c.re.abs();
            let cross = c.im.abs();
            let ratio = if cross == 0.0 { f64::INFINITY } else { direct / cross };
            CouplingMetric { neighbor: k.clone(), direct, cross, ratio }
        })
        .collect()
}

fn steady_views<'a>(
    case: &'a NetworkCase,
    states: &BranchStates,
) -> Result<Vec<ElementView<'a>>, AnalysisError> {
    let mut views = Vec::new();
    for e in &case.elements {
        if states.disabled.contains(&e.id) {
            continue;
        }
        let block = match &e.kind {
            ElementKind::StaticY { y } => Block2::symmetric(*y),
            _ => match states.dynamic.get(&e.id) {
                Some(st) => match st.y {
                    YNow::Scalar(y) => Block2::symmetric(y),
                    YNow::Block(b) => b,
                },
                None => return Err(AnalysisError::MissingState(e.id.clone())),
            },
        };
        views.push(ElementView { id: &e.id, from: e.from, to: e.to, block });
    }
    Ok(views)
}

fn bus_mask(case: &NetworkCase, opts: &AnalysisOptions) -> Result<Vec<bool>, AnalysisError> {
    match &opts.buses {
        None => Ok(vec![true; case.n_buses()]),
        Some(ids) => {
            let mut mask = vec![false; case.n_buses()];
            for id in ids {
                let h =
                    case.bus_index(id).ok_or_else(|| AnalysisError::UnknownBus(id.clone()))?;
                mask[h] = true;
            }
            Ok(mask)
        }
    }
}

/// Decomposition of every covered bus at the power flow solution. All CFs
/// are zero at the stationary point, so the records reduce to the weight
/// tables.
pub fn steady_coefficients(
    case: &NetworkCase,
    sol: &PfSolution,
    opts: &AnalysisOptions,
) -> Result<Vec<CfDecomposition>, AnalysisError> {
    let mask = bus_mask(case, opts)?;
    let states = solution_branch_states(case, sol);
    let views = steady_views(case, &states)?;
    let zero = ComplexFrequency::ZERO;
    let mut out = Vec::new();
    for h in 0..case.n_buses() {
        if !mask[h] {
            continue;
        }
        let inj = kcl_injection(h, &sol.v, &views);
        let c = compute_coefficients(h, &sol.v, &views, inj, opts)?;
        let chi = c.c_chi.keys().map(|k| (k.clone(), zero)).collect();
        let eta_neighbors: BTreeMap<String, ComplexFrequency> =
            c.c_eta.keys().map(|&k| (case.buses[k].id.clone(), zero)).collect();
        let c_eta = c.c_eta.iter().map(|(&k, &w)| (case.buses[k].id.clone(), w)).collect();
        out.push(CfDecomposition {
            bus: case.buses[h].id.clone(),
            time: 0.0,
            c_chi: c.c_chi,
            c_eta,
            c_xi: c.c_xi,
            chi,
            eta_neighbors,
            xi: zero,
            eta_reconstructed: zero,
            eta_direct: zero,
            flagged: false,
            flag_reasons: Vec::new(),
        });
    }
    Ok(out)
}

/// Audit aggregates of one bus: residual maxima over non-flagged samples
/// and the list of flagged ones.
#[derive(Debug, Clone)]
pub struct BusAudit {
    pub bus: String,
    pub samples_audited: usize,
    pub samples_flagged: usize,
    pub max_neighbor_sum_residual: f64,
    pub max_branch_sum_residual: f64,
    pub max_branch_sum_gap: f64,
    pub max_reconstruction_error: f64,
    pub flagged_samples: Vec<usize>,
}

/// Contiguous run of samples a series RL element spent inside its
/// cancellation band, stencil dilation included.
#[derive(Debug, Clone)]
pub struct SingularInterval {
    pub element: String,
    pub first: usize,
    pub last: usize,
}

/// A sign change of a series RL element's equivalent resistance between
/// two adjacent samples; `sample` is the first sample after the change.
#[derive(Debug, Clone)]
pub struct ResistanceCrossing {
    pub element: String,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub case_name: String,
    pub dt: f64,
    pub samples: usize,
    pub segments: Vec<(usize, usize)>,
    pub buses: Vec<BusAudit>,
    pub singular_intervals: Vec<SingularInterval>,
    pub resistance_crossings: Vec<ResistanceCrossing>,
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "case {}: {} samples at dt = {:.6e} s, {} segment(s)",
            self.case_name,
            self.samples,
            self.dt,
            self.segments.len()
        )?;
        for b in &self.buses {
            writeln!(f, "bus {}: audited {}, flagged {}", b.bus, b.samples_audited, b.samples_flagged)?;
            writeln!(
                f,
                "  neighbor weight sum vs 1:    max residual {:.3e}",
                b.max_neighbor_sum_residual
            )?;
            writeln!(
                f,
                "  branch weight sum vs -c_xi:  max residual {:.3e} (sign-free gap {:.3e})",
                b.max_branch_sum_residual, b.max_branch_sum_gap
            )?;
            writeln!(
                f,
                "  reconstructed vs direct CF:  max deviation {:.3e}",
                b.max_reconstruction_error
            )?;
            if !b.flagged_samples.is_empty() {
                write!(f, "  flagged samples:")?;
                for s in &b.flagged_samples {
                    write!(f, " {s}")?;
                }
                writeln!(f)?;
            }
        }
        for s in &self.singular_intervals {
            writeln!(
                f,
                "cancellation band: element {} samples {}..{} (t = {:.6} s .. {:.6} s)",
                s.element,
                s.first,
                s.last,
                s.first as f64 * self.dt,
                s.last as f64 * self.dt
            )?;
        }
        let mut per_elem: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
        for c in &self.resistance_crossings {
            let e = per_elem.entry(&c.element).or_insert((0, c.sample, c.sample));
            e.0 += 1;
            e.1 = e.1.min(c.sample);
            e.2 = e.2.max(c.sample);
        }
        if per_elem.is_empty() {
            writeln!(f, "no equivalent-resistance zero crossings")?;
        } else {
            for (id, (count, first, last)) in per_elem {
                writeln!(
                    f,
                    "element {id}: {count} equivalent-resistance zero crossing(s), samples {first}..{last}"
                )?;
            }
        }
        Ok(())
    }
}

/// Replays a trajectory and audits the decomposition at every covered bus
/// and sample. Numerical trouble flags samples, it never aborts; errors
/// are reserved for trajectories that do not match the case.
pub fn audit_trajectory(
    case: &NetworkCase,
    traj: &Trajectory,
    opts: &AnalysisOptions,
) -> Result<AuditReport, AnalysisError> {
    run_analysis(case, traj, opts, &mut |_| {})
}

/// Like [`audit_trajectory`], but also hands every per-bus, per-sample
/// decomposition record to `sink`, in time-major, case-bus order.
pub fn decompose_trajectory(
    case: &NetworkCase,
    traj: &Trajectory,
    opts: &AnalysisOptions,
    mut sink: impl FnMut(CfDecomposition),
) -> Result<AuditReport, AnalysisError> {
    run_analysis(case, traj, opts, &mut sink)
}

/// Per-bus series derived from the trajectory before the sample sweep.
struct BusSeries {
    /// CF used on the model side of the reconstruction: exact `v'/v`
    /// where the simulator integrated the voltage, the numerical estimate
    /// otherwise.
    eta_model: Vec<Complex64>,
    /// Derivative of `eta_model`, for capacitive shunt rate terms.
    eta_model_dot: Vec<Complex64>,
    /// Independent numerical estimate of the voltage CF, the oracle side.
    eta_direct: Vec<Complex64>,
    /// CF estimate unusable at this sample.
    flag: Vec<bool>,
}

/// Channel data of one element, resolved once per audit.
enum ElemData<'a> {
    Fixed(Block2),
    Rl {
        r: f64,
        l: f64,
        i: &'a [f64],
        didt: &'a [f64],
        ddidt: Vec<f64>,
        /// Inside the cancellation band, dilated to stencil reach.
        flag: Vec<bool>,
    },
    Gc {
        g: f64,
        c: f64,
    },
    Ltc {
        y_t: Complex64,
        alpha0: f64,
        m: &'a [f64],
        dmdt: &'a [f64],
    },
    Conv {
        y: Complex64,
        m: &'a [f64],
        alpha: &'a [f64],
        dmdt: Vec<f64>,
        dalphadt: &'a [f64],
    },
}

/// Admittance block of one element at one sample plus the row products of
/// its entry CFs: `num_from = chi_ff ff v_f + chi_ft ft v_t` and the
/// mirrored `num_to`, expanded so shared near-zero factors cancel.
struct ElemSample {
    block: Block2,
    num_from: Complex64,
    num_to: Complex64,
    singular: bool,
}

fn nan_c() -> Complex64 {
    Complex64::new(f64::NAN, f64::NAN)
}

fn fin(v: CfValue) -> Complex64 {
    v.finite().expect("entry CF is finite by construction")
}

/// Derivative of a complex series, segment by segment; NaN where a
/// segment is too short for a stencil.
fn segmented_derivative(xs: &[Complex64], segments: &[(usize, usize)], dt: f64) -> Vec<Complex64> {
    let mut out = vec![nan_c(); xs.len()];
    for &(a, b) in segments {
        if b - a < 3 {
            continue;
        }
        let d = cf::sampled_derivative(&xs[a..b], dt);
        out[a..b].copy_from_slice(&d);
    }
    out
}

fn segmented_derivative_real(xs: &[f64], segments: &[(usize, usize)], dt: f64) -> Vec<f64> {
    let z: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    segmented_derivative(&z, segments, dt).iter().map(|d| d.re).collect()
}

fn channel<'a>(traj: &'a Trajectory, name: String) -> Result<&'a [f64], AnalysisError> {
    traj.channel(&name).ok_or(AnalysisError::MissingChannel(name))
}

fn build_bus_series(
    traj: &Trajectory,
    bus: usize,
    dvdt: Option<&[f64]>,
    segments: &[(usize, usize)],
    opts: &AnalysisOptions,
) -> BusSeries {
    let n = traj.n_samples();
    let v = &traj.v[bus];
    let mut eta_model = vec![nan_c(); n];
    let mut eta_direct = vec![nan_c(); n];
    let mut flag = vec![false; n];
    for &(a, b) in segments {
        if b - a < 3 {
            for s in a..b {
                flag[s] = true;
            }
            continue;
        }
        let signal = ComplexSignal::new(traj.dt, v[a..b].to_vec());
        match cf::estimate_cf(&signal, opts.eps_mag) {
            Ok(samples) => {
                for (off, cs) in samples.iter().enumerate() {
                    eta_direct[a + off] = cs.cf.as_complex();
                    if cs.singular {
                        flag[a + off] = true;
                    }
                }
            }
            Err(_) => {
                for s in a..b {
                    flag[s] = true;
                }
            }
        }
        match dvdt {
            Some(d) => {
                for s in a..b {
                    if v[s].norm() > opts.eps_mag {
                        eta_model[s] = Complex64::new(d[s], 0.0) / v[s];
                    } else {
                        flag[s] = true;
                    }
                }
            }
            None => {
                eta_model[a..b].copy_from_slice(&eta_direct[a..b]);
            }
        }
    }
    let eta_model_dot = segmented_derivative(&eta_model, segments, traj.dt);
    BusSeries { eta_model, eta_model_dot, eta_direct, flag }
}

/// First sample at which each element is out of service. Events are
/// matched by sample index, mirroring the simulator's event-to-grid snap;
/// the sample recorded at the event instant already holds the post-event
/// state.
fn element_off_samples(case: &NetworkCase, dt: f64, n: usize) -> Vec<Option<usize>> {
    let mut branch_off: BTreeMap<usize, usize> = BTreeMap::new();
    for ev in &case.events {
        if ev.action != EventAction::DisconnectBranch {
            continue;
        }
        let k = (ev.t / dt).round();
        if !k.is_finite() || k < 0.0 || k >= n as f64 {
            continue;
        }
        let k = k as usize;
        let entry = branch_off.entry(ev.target).or_insert(k);
        *entry = (*entry).min(k);
    }
    case.elements.iter().map(|e| branch_off.get(&e.branch).copied()).collect()
}

/// Flags the samples where `R i + L di/dt` falls inside the relative
/// cancellation band, then dilates by one sample so derivative stencils
/// touching a corrupted value are covered too. Dilation stays inside the
/// segment; stencils never cross events.
fn rl_singularity_flags(
    r: f64,
    l: f64,
    i: &[f64],
    didt: &[f64],
    segments: &[(usize, usize)],
    opts: &AnalysisOptions,
) -> Vec<bool> {
    let mut flags = vec![false; i.len()];
    for &(a, b) in segments {
        let mut base = vec![false; b - a];
        for s in a..b {
            let scale = r * i[s].abs() + (l * didt[s]).abs();
            if scale > opts.eps_sing && (r * i[s] + l * didt[s]).abs() <= RL_CANCEL_REL * scale {
                base[s - a] = true;
            }
        }
        for (off, hit) in base.iter().enumerate() {
            if *hit {
                flags[a + off] = true;
                if off > 0 {
                    flags[a + off - 1] = true;
                }
                if a + off + 1 < b {
                    flags[a + off + 1] = true;
                }
            }
        }
    }
    flags
}

fn prepare_elements<'a>(
    case: &NetworkCase,
    traj: &'a Trajectory,
    segments: &[(usize, usize)],
    opts: &AnalysisOptions,
) -> Result<Vec<ElemData<'a>>, AnalysisError> {
    let dt = traj.dt;
    let mut out = Vec::with_capacity(case.elements.len());
    for e in &case.elements {
        let data = match &e.kind {
            ElementKind::StaticY { y } => ElemData::Fixed(Block2::symmetric(*y)),
            ElementKind::SeriesRl { r, l } => {
                let i = channel(traj, format!("rl:{}:i", e.id))?;
                let didt = channel(traj, format!("rl:{}:didt", e.id))?;
                let ddidt = segmented_derivative_real(didt, segments, dt);
                let flag = rl_singularity_flags(*r, *l, i, didt, segments, opts);
                ElemData::Rl { r: *r, l: *l, i, didt, ddidt, flag }
            }
            ElementKind::ShuntGc { g, c } => {
                debug_assert!(e.to == Terminal::Ground, "shunt element spans a single bus");
                if *c == 0.0 {
                    ElemData::Fixed(Block2::symmetric(Complex64::new(*g, 0.0)))
                } else {
                    ElemData::Gc { g: *g, c: *c }
                }
            }
            ElementKind::Transformer { y_t, m0, alpha0, control } => {
                if control.is_none() {
                    ElemData::Fixed(transformer_admittance_block(*y_t, *m0, *alpha0))
                } else {
                    let m = channel(traj, format!("ltc:{}:m", e.id))?;
                    let dmdt = channel(traj, format!("ltc:{}:dmdt", e.id))?;
                    ElemData::Ltc { y_t: *y_t, alpha0: *alpha0, m, dmdt }
                }
            }
            ElementKind::Converter { y, .. } => {
                let m = channel(traj, format!("conv:{}:m", e.id))?;
                let alpha = channel(traj, format!("conv:{}:alpha", e.id))?;
                let dmdt_ch = channel(traj, format!("conv:{}:dmdt", e.id))?;
                let dalphadt = channel(traj, format!("conv:{}:dalphadt", e.id))?;
                // The modulation-rate channel is NaN where the DC voltage
                // is algebraic; fall back to a numerical derivative there.
                let mut dmdt = dmdt_ch.to_vec();
                if dmdt.iter().any(|x| !x.is_finite()) {
                    let numeric = segmented_derivative_real(m, segments, dt);
                    for (d, num) in dmdt.iter_mut().zip(numeric) {
                        if !d.is_finite() {
                            *d = num;
                        }
                    }
                }
                ElemData::Conv { y: *y, m, alpha, dmdt, dalphadt }
            }
        };
        out.push(data);
    }
    Ok(out)
}

fn eval_element(
    data: &ElemData,
    s: usize,
    from: usize,
    to: Terminal,
    v_s: &[Complex64],
    series: &[BusSeries],
    opts: &AnalysisOptions,
) -> ElemSample {
    let zero = Complex64::new(0.0, 0.0);
    match data {
        ElemData::Fixed(b) => ElemSample { block: *b, num_from: zero, num_to: zero, singular: false },
        ElemData::Rl { r, l, i, didt, ddidt, flag } => {
            let (r, l) = (*r, *l);
            let (i, di, ddi) = (i[s], didt[s], ddidt[s]);
            let scale = r * i.abs() + (l * di).abs();
            if scale <= opts.eps_sing {
                // Idle branch: no current, no rate; the admittance limit
                // is the plain conductance.
                let y = Complex64::new(1.0 / r, 0.0);
                return ElemSample {
                    block: Block2::symmetric(y),
                    num_from: zero,
                    num_to: zero,
                    singular: false,
                };
            }
            let den = r * i + l * di;
            let y = Complex64::new(i / den, 0.0);
            // chi y (v_t - v_f) with the branch equation substituted: the
            // current magnitude cancels, leaving a form regular at i = 0.
            let num = Complex64::new(l * (ddi * i - di * di) / den, 0.0);
            ElemSample {
                block: Block2::symmetric(y),
                num_from: num,
                num_to: -num,
                singular: flag[s],
            }
        }
        ElemData::Gc { g, c } => {
            let eta = series[from].eta_model[s];
            let eta_dot = series[from].eta_model_dot[s];
            let y = Complex64::new(*g, 0.0) + c * eta;
            // chi_ff ff v = -c eta' v: the shunt admittance cancels.
            let num = -c * eta_dot * v_s[from];
            ElemSample { block: Block2::symmetric(y), num_from: num, num_to: zero, singular: false }
        }
        ElemData::Ltc { y_t, alpha0, m, dmdt } => {
            let block = transformer_admittance_block(*y_t, m[s], *alpha0);
            let chi = transformer_chi_block(m[s], dmdt[s], 0.0);
            let vf = v_s[from];
            let vt = v_s[to.bus().expect("transformer spans two buses")];
            // chi_ff is zero: the unit-side diagonal entry is constant.
            let num_from = fin(chi.ft) * block.ft * vt;
            let num_to = fin(chi.tf) * block.tf * vf + fin(chi.tt) * block.tt * vt;
            ElemSample { block, num_from, num_to, singular: false }
        }
        ElemData::Conv { y, m, alpha, dmdt, dalphadt } => {
            let ac = from;
            let dc = to.bus().expect("converter DC terminal is a bus");
            let v_ac = v_s[ac];
            let op = ConverterOperatingPoint {
                m: m[s],
                alpha: alpha[s],
                theta_ac: v_ac.arg(),
                v_ac: v_ac.norm(),
                v_dc: v_s[dc].re,
                m_dot: dmdt[s],
                alpha_dot: dalphadt[s],
                eta_ac: series[ac].eta_model[s],
                rho_dc: series[dc].eta_model[s].re,
            };
            let block = converter_admittance_block(*y, &op);
            let chi = converter_chi_block(*y, &op);
            // chi_ff is zero: the AC diagonal entry is the constant -y.
            let num_from = fin(chi.ft) * block.ft * v_s[dc];
            let (tt_term, singular) = match chi.tt {
                CfValue::Finite(x) => (x * block.tt * v_s[dc], false),
                CfValue::Singular => (nan_c(), true),
            };
            let num_to = fin(chi.tf) * block.tf * v_ac + tt_term;
            ElemSample { block, num_from, num_to, singular }
        }
    }
}

fn detect_crossings(
    case: &NetworkCase,
    elems: &[ElemData],
    off_at: &[Option<usize>],
    segments: &[(usize, usize)],
    opts: &AnalysisOptions,
) -> Vec<ResistanceCrossing> {
    let mut out = Vec::new();
    for (ei, e) in case.elements.iter().enumerate() {
        let ElemData::Rl { r, l, i, didt, .. } = &elems[ei] else { continue };
        let end = off_at[ei].unwrap_or(usize::MAX);
        for &(a, b) in segments {
            for s in a..b.saturating_sub(1) {
                if s + 1 >= end {
                    break;
                }
                let sc0 = r * i[s].abs() + (l * didt[s]).abs();
                let sc1 = r * i[s + 1].abs() + (l * didt[s + 1]).abs();
                if sc0 <= opts.eps_sing || sc1 <= opts.eps_sing {
                    continue;
                }
                let d0 = r * i[s] + l * didt[s];
                let d1 = r * i[s + 1] + l * didt[s + 1];
                if d0 * d1 < 0.0 {
                    out.push(ResistanceCrossing { element: e.id.clone(), sample: s + 1 });
                }
            }
        }
    }
    out
}

fn flag_intervals(case: &NetworkCase, elems: &[ElemData]) -> Vec<SingularInterval> {
    let mut out = Vec::new();
    for (ei, e) in case.elements.iter().enumerate() {
        let ElemData::Rl { flag, .. } = &elems[ei] else { continue };
        let mut s = 0;
        while s < flag.len() {
            if flag[s] {
                let first = s;
                while s + 1 < flag.len() && flag[s + 1] {
                    s += 1;
                }
                out.push(SingularInterval { element: e.id.clone(), first, last: s });
            }
            s += 1;
        }
    }
    out
}

struct SampleCtx<'a> {
    case: &'a NetworkCase,
    v_s: &'a [Complex64],
    views: &'a [ElementView<'a>],
    scratch: &'a [Option<ElemSample>],
    incident: &'a [Vec<usize>],
    series: &'a [BusSeries],
    inj: &'a [Vec<Complex64>],
    inj_dot: &'a [Vec<Complex64>],
}

fn build_row(ctx: &SampleCtx, h: usize, s: usize, time: f64, opts: &AnalysisOptions) -> CfDecomposition {
    let zero = Complex64::new(0.0, 0.0);
    let mut reasons: Vec<String> = Vec::new();
    if ctx.series[h].flag[s] {
        reasons.push("voltage CF estimate unusable".into());
    }
    let bus_id = ctx.case.buses[h].id.clone();
    let i_h = ctx.inj[h][s];
    let di_h = ctx.inj_dot[h][s];
    let xi = if i_h.norm() > opts.eps_mag {
        ComplexFrequency::from_complex(di_h / i_h)
    } else {
        ComplexFrequency::nan()
    };
    let eta_direct = ComplexFrequency::from_complex(ctx.series[h].eta_direct[s]);

    let coeffs = match compute_coefficients(h, ctx.v_s, ctx.views, i_h, opts) {
        Ok(c) => c,
        Err(err) => {
            reasons.push(err.to_string());
            return CfDecomposition {
                bus: bus_id,
                time,
                c_chi: BTreeMap::new(),
                c_eta: BTreeMap::new(),
                c_xi: nan_c(),
                chi: BTreeMap::new(),
                eta_neighbors: BTreeMap::new(),
                xi,
                eta_reconstructed: ComplexFrequency::nan(),
                eta_direct,
                flagged: true,
                flag_reasons: reasons,
            };
        }
    };
    let den = ctx.v_s[h] * coeffs.y_hh;

    let mut sum = zero;
    let mut chi = BTreeMap::new();
    for &ei in &ctx.incident[h] {
        let Some(es) = &ctx.scratch[ei] else { continue };
        let e = &ctx.case.elements[ei];
        if es.singular {
            reasons.push(format!("element {} inside its cancellation band", e.id));
        }
        let vf = ctx.v_s[e.from];
        let vt = match e.to {
            Terminal::Bus(k) => ctx.v_s[k],
            Terminal::Ground => zero,
        };
        let (num, flow) = if e.from == h {
            (es.num_from, from_flow(&es.block, vf, vt))
        } else {
            (es.num_to, to_flow(&es.block, vf, vt))
        };
        sum += -num / den;
        let value = if num == zero {
            ComplexFrequency::ZERO
        } else if !(flow.norm() > opts.eps_mag) {
            ComplexFrequency::nan()
        } else {
            ComplexFrequency::from_complex(-num / flow)
        };
        chi.insert(e.id.clone(), value);
    }

    let mut c_eta = BTreeMap::new();
    let mut eta_neighbors = BTreeMap::new();
    for (&k, &w) in &coeffs.c_eta {
        let name = ctx.case.buses[k].id.clone();
        let eta_k = ctx.series[k].eta_model[s];
        if w != zero {
            sum += w * eta_k;
            if ctx.series[k].flag[s] {
                reasons.push(format!("neighbor {name} CF estimate unusable"));
            }
        }
        eta_neighbors.insert(name.clone(), ComplexFrequency::from_complex(eta_k));
        c_eta.insert(name, w);
    }

    sum += -di_h / den;
    let eta_reconstructed = ComplexFrequency::from_complex(sum);
    if !eta_reconstructed.is_finite() && reasons.is_empty() {
        reasons.push("non-finite reconstruction".into());
    }
    let flagged = !reasons.is_empty();
    CfDecomposition {
        bus: bus_id,
        time,
        c_chi: coeffs.c_chi,
        c_eta,
        c_xi: coeffs.c_xi,
        chi,
        eta_neighbors,
        xi,
        eta_reconstructed,
        eta_direct,
        flagged,
        flag_reasons: reasons,
    }
}

fn run_analysis(
    case: &NetworkCase,
    traj: &Trajectory,
    opts: &AnalysisOptions,
    sink: &mut dyn FnMut(CfDecomposition),
) -> Result<AuditReport, AnalysisError> {
    let n = traj.n_samples();
    let nb = case.n_buses();
    if traj.case_name != case.name {
        return Err(AnalysisError::BadTrajectory(format!(
            "trajectory was recorded from case {:?}, not {:?}",
            traj.case_name, case.name
        )));
    }
    if traj.bus_ids.len() != nb
        || traj.bus_ids.iter().zip(&case.buses).any(|(id, b)| *id != b.id)
    {
        return Err(AnalysisError::BadTrajectory(
            "trajectory bus list does not match the case".into(),
        ));
    }
    if n == 0 || traj.v.len() != nb || traj.v.iter().any(|col| col.len() != n) {
        return Err(AnalysisError::BadTrajectory(
            "trajectory voltage table is empty or ragged".into(),
        ));
    }
    let mask = bus_mask(case, opts)?;
    let segments = traj.segment_ranges();
    let off_at = element_off_samples(case, traj.dt, n);

    let series: Vec<BusSeries> = case
        .buses
        .iter()
        .enumerate()
        .map(|(b, bus)| {
            let dvdt = traj.channel(&format!("bus:{}:dvdt", bus.id));
            build_bus_series(traj, b, dvdt, &segments, opts)
        })
        .collect();

    let mut elems = prepare_elements(case, traj, &segments, opts)?;
    // Flags of an element carry no meaning once it is switched out.
    for (ei, data) in elems.iter_mut().enumerate() {
        if let ElemData::Rl { flag, .. } = data {
            if let Some(k) = off_at[ei] {
                for f in flag.iter_mut().skip(k) {
                    *f = false;
                }
            }
        }
    }
    let resistance_crossings = detect_crossings(case, &elems, &off_at, &segments, opts);
    let singular_intervals = flag_intervals(case, &elems);

    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (ei, e) in case.elements.iter().enumerate() {
        incident[e.from].push(ei);
        if let Terminal::Bus(k) = e.to {
            incident[k].push(ei);
        }
    }

    // First sweep: element flows accumulate into the net injected current
    // of every bus, the exact series the xi term differentiates.
    let zero = Complex64::new(0.0, 0.0);
    let mut inj = vec![vec![zero; n]; nb];
    let mut v_s = vec![zero; nb];
    for s in 0..n {
        for b in 0..nb {
            v_s[b] = traj.v[b][s];
        }
        for (ei, e) in case.elements.iter().enumerate() {
            if off_at[ei].is_some_and(|k| s >= k) {
                continue;
            }
            let es = eval_element(&elems[ei], s, e.from, e.to, &v_s, &series, opts);
            let vf = v_s[e.from];
            let vt = match e.to {
                Terminal::Bus(k) => v_s[k],
                Terminal::Ground => zero,
            };
            inj[e.from][s] += from_flow(&es.block, vf, vt);
            if let Terminal::Bus(k) = e.to {
                inj[k][s] += to_flow(&es.block, vf, vt);
            }
        }
    }
    let inj_dot: Vec<Vec<Complex64>> =
        inj.iter().map(|col| segmented_derivative(col, &segments, traj.dt)).collect();

    let mut audits: Vec<BusAudit> = Vec::new();
    let mut slot = vec![None; nb];
    for h in 0..nb {
        if mask[h] {
            slot[h] = Some(audits.len());
            audits.push(BusAudit {
                bus: case.buses[h].id.clone(),
                samples_audited: 0,
                samples_flagged: 0,
                max_neighbor_sum_residual: 0.0,
                max_branch_sum_residual: 0.0,
                max_branch_sum_gap: 0.0,
                max_reconstruction_error: 0.0,
                flagged_samples: Vec::new(),
            });
        }
    }

    // Second sweep: full per-bus rows.
    let mut scratch: Vec<Option<ElemSample>> = (0..case.elements.len()).map(|_| None).collect();
    let mut views: Vec<ElementView> = Vec::with_capacity(case.elements.len());
    for s in 0..n {
        for b in 0..nb {
            v_s[b] = traj.v[b][s];
        }
        views.clear();
        for (ei, e) in case.elements.iter().enumerate() {
            scratch[ei] = None;
            if off_at[ei].is_some_and(|k| s >= k) {
                continue;
            }
            let es = eval_element(&elems[ei], s, e.from, e.to, &v_s, &series, opts);
            views.push(ElementView { id: &e.id, from: e.from, to: e.to, block: es.block });
            scratch[ei] = Some(es);
        }
        let ctx = SampleCtx {
            case,
            v_s: &v_s,
            views: &views,
            scratch: &scratch,
            incident: &incident,
            series: &series,
            inj: &inj,
            inj_dot: &inj_dot,
        };
        for h in 0..nb {
            let Some(slot_h) = slot[h] else { continue };
            let row = build_row(&ctx, h, s, traj.times[s], opts);
            let a = &mut audits[slot_h];
            if row.flagged {
                a.samples_flagged += 1;
                a.flagged_samples.push(s);
            } else {
                a.samples_audited += 1;
                a.max_neighbor_sum_residual =
                    a.max_neighbor_sum_residual.max(row.neighbor_sum_residual());
                a.max_branch_sum_residual =
                    a.max_branch_sum_residual.max(row.branch_sum_residual());
                a.max_branch_sum_gap = a.max_branch_sum_gap.max(row.branch_sum_gap());
                a.max_reconstruction_error =
                    a.max_reconstruction_error.max(row.reconstruction_error());
            }
            sink(row);
        }
    }

    Ok(AuditReport {
        case_name: case.name.clone(),
        dt: traj.dt,
        samples: n,
        segments,
        buses: audits,
        singular_intervals,
        resistance_crossings,
    })
}
