//! Distributed Newton optimization over consensus networks.
//!
//! A library and CLI for simulating second-order distributed optimization on a
//! synchronous multi-agent network. Each node holds a private objective and
//! communicates with its neighbors through a doubly stochastic mixing matrix.
//! The crate provides:
//!
//! - network topologies and their spectral analysis ([`netgraph`]),
//! - local objective contracts and a target-localization test problem
//!   ([`objectives`]),
//! - static and dynamic average consensus primitives ([`consensus`]),
//! - four distributed Newton-type algorithms and the synchronous round engine
//!   ([`dnewton`]),
//! - offline, adaptive, and certified-global step-size selection ([`stepsize`]),
//! - the linearized rate models used to compute and verify optimal step sizes
//!   ([`spectral`]),
//! - an experiment harness with CSV output ([`harness`]).

pub mod consensus;
pub mod dnewton;
pub mod harness;
pub mod linalg;
pub mod netgraph;
pub mod objectives;
pub mod rng;
pub mod spectral;
pub mod stepsize;

pub use dnewton::{AlgorithmVariant, RunConfig, RunOutcome, Trace};
pub use netgraph::{SpectralParams, Topology};
pub use objectives::{LocalObjective, LocalizationInstance, ObjectiveSet};
