//! Sparsity-constrained optimal control of multi-agent systems represented
//! as weighted particle measures.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`] holds the control-affine vector field and its control set,
//! * [`magnitude`] computes the control magnitude density `Ψ(x, v)`,
//! * [`measures`] and [`transport`] provide discrete measures and exact
//!   Wasserstein distances,
//! * [`ensemble`] integrates particle trajectories together with their
//!   cumulative effort coordinates,
//! * [`gdpp`] is an abstract dynamic-programming engine on finite instances,
//! * [`hamiltonian`] evaluates the budgeted Hamiltonians,
//! * [`solvers`] contains the minimum-time and terminal-cost solvers,
//! * [`scenario`] ties everything to the JSON scenario format.

pub mod dynamics;
pub mod ensemble;
pub mod expr;
pub mod extended;
pub mod gdpp;
pub mod hamiltonian;
pub mod linalg;
pub mod magnitude;
pub mod measures;
pub mod scenario;
pub mod solvers;
pub mod transport;

pub use dynamics::{ControlSet, ControlSystem, VectorField};
pub use extended::ExtReal;
pub use measures::{DiscreteMeasure, TargetSpec};
