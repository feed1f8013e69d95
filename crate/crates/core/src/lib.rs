//! Adaptive bias-estimating consensus for networked double integrators over
//! time-varying undirected graphs.
//!
//! The crate covers graph algebra ([`graph`]), excitation tests
//! ([`excitation`]), the closed-loop network ([`plant`], [`controller`]),
//! post-hoc Lyapunov certification ([`certify`]) and an experiment runner
//! ([`lab`]).

pub mod certify;
pub mod controller;
pub mod error;
pub mod excitation;
pub mod graph;
pub mod lab;
pub mod linalg;
pub mod ode;
pub mod plant;

pub use certify::{CertificateConstants, CertificateReport, LyapunovTrace};
pub use controller::{ControllerState, GainSet, MeasurementSet, ParameterEstimate};
pub use error::{Error, Result};
pub use excitation::{ExcitationKind, ExcitationReport, MatrixSignal};
pub use graph::{EdgeIndexing, GraphSchedule, Segment, WeightedAdjacency};
pub use lab::{DecompositionRule, ScenarioConfig, SummaryReport};
pub use plant::{BiasVector, GainProfile, Integrator, NetworkState, SimConfig, TrajectoryLog};
