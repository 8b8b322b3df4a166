//! Proportional-fair EV charging on a line distribution network.
//!
//! Lots `1..=N` sit on a line behind a feeder. EVs arrive at each lot as a
//! Poisson stream, need an Exp(1) amount of energy, and share the lot's power
//! equally. Lot powers are the proportional-fair allocation over the
//! voltage-drop feasible set of either the Distflow or the Linearized Distflow
//! model. The crate provides:
//!
//! * [`powerflow`]: voltage recursion, constraint functions and feasibility;
//! * [`allocator`]: proportional-fair allocation under both models;
//! * [`markov`]: the occupancy CTMC, its simulation and exact stationary solution;
//! * [`experiments`]: arrival-rate sweeps, critical-rate detection and heat maps.

pub mod allocator;
pub mod experiments;
pub mod markov;
pub mod powerflow;

pub use allocator::{Allocator, AllocationError, StateVector};
pub use powerflow::{AllocationVector, NetworkConfig, PowerFlowError, PowerFlowModel, VoltageProfile};
