//! Simulation and verification toolkit for branching random walks in the
//! boundary case.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the pure
//! algorithmic layer:
//!
//! * [`offspring`]: finite point-process reproduction laws, boundary checks and
//!   normalization.
//! * [`walk`]: the one-dimensional random walk obtained from the many-to-one
//!   formula, its renewal function and exact lattice dynamic programs.
//! * [`engine`]: forward simulation of the branching random walk, trajectory
//!   statistics and window-event detection.
//! * [`spine`]: sampling under the truncated derivative-martingale tilt and
//!   importance-sampling estimators.
//! * [`oracle`]: exhaustive enumeration used as ground truth.
//!
//! IO, file formats, parallel replica fan-out and the command line live in the
//! companion `brwlab` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod engine;
pub mod num;
pub mod offspring;
pub mod oracle;
pub mod rng;
pub mod spine;
pub mod stats;
pub mod walk;

pub use engine::{
    detect_events, grow_tree, prune_policy, simulate, DepthRecord, EngineError, EventOutcome, EventWindowSpec,
    PrunePolicy, SimConfig, TrajectoryStats, Tree,
};
pub use offspring::{check_boundary, normalize_to_boundary, Atom, BoundaryReport, LawError, OffspringLaw};
pub use walk::{derive_step_law, renewal_function, RenewalTable, StepLaw, WalkError};
