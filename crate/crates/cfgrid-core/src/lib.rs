//! Hybrid AC/DC grid modeling with the complex frequency of every carrier:
//! bus voltages, device currents, and branch admittances.
//!
//! The crate builds a network from a JSON case, solves the mixed AC/DC
//! power flow, integrates the differential-algebraic dynamics, and then
//! explains each bus voltage CF as an exact weighted sum of neighboring
//! voltage CFs, branch admittance CFs, and the local injection current CF.

pub mod analysis;
pub mod branches;
pub mod cf;
pub mod dynamics;
pub mod network;
pub mod powerflow;

pub use analysis::{
    audit_trajectory, compute_chi_hh, compute_coefficients, coupling_metrics,
    decompose_trajectory, kcl_injection, reconstruct_eta, steady_coefficients, AnalysisError,
    AnalysisOptions, AuditReport, BusAudit, CfDecomposition, Coefficients, CouplingMetric,
    ElementView, ResistanceCrossing, SingularInterval,
};
pub use branches::{BranchCfState, Block2, CfValue, ChiNow, YNow};
pub use cf::{CfError, ComplexFrequency, ComplexSignal};
pub use dynamics::{simulate, EventRecord, SimError, SimOptions, Trajectory};
pub use network::{BranchStates, BusKind, CaseError, NetworkCase, Terminal, YBus, parse_case};
pub use powerflow::{PfError, PfOptions, PfSolution};
