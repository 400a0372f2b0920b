//! Tracking control of flexible-joint robots by virtual differential
//! passivity, in the port-Hamiltonian framework.
//!
//! A flexible-joint robot couples each motor to its link through an elastic
//! joint, so torques act on the motor coordinates only. The controller here
//! closes that gap in two stages — an inner link law and a motor law that
//! routes the link command through the joint stiffness — and the resulting
//! closed loop *contracts*: a quadratic storage function on tangent vectors
//! decays at a rate derived from the gains before anything is simulated.
//!
//! The crate has five layers:
//!
//! - [`phmech`] — port-Hamiltonian mechanics: energy, structure matrices,
//!   vector fields, and the flexible-joint robot model;
//! - [`virtualsys`] — the virtual system associated to a mechanical system,
//!   its variational (prolonged) dynamics, and differential storage
//!   functions on the tangent bundle;
//! - [`control`] — the two-stage tracking law, its exact
//!   reference-derivative chain, and the rate certificate;
//! - [`sim`] — deterministic fixed-step integration of the open loop, the
//!   closed loop, and the prolonged closed loop, with time-series records;
//! - [`verify`] — independent numerical oracles (finite differences,
//!   two-trajectory flows, generator reassembly) that certify the
//!   structural identities and convergence claims.
//!
//! A companion guide with worked examples lives in `book/`; its snippets
//! compile and run as part of `cargo test`. The `vdpbc` binary (crate
//! `vdpbc-cli`) exposes scenario runs, parameter sweeps and the
//! certification suite.

pub mod control;
pub mod phmech;
pub mod sim;
pub mod verify;
pub mod virtualsys;

#[cfg(doctest)]
pub mod book;

pub use control::{ControlDecomposition, ControllerConfig, FjrController, SineReference};
pub use phmech::{FjrModel, MechanicalModel, PhaseState, SingleJointParams};
pub use sim::{IntegratorConfig, SimulationRecord};
