//! # mftg-core
//!
//! A finite-space laboratory for discrete-time, infinite-horizon discounted
//! mean field type games (MFTGs) with global and team-level common noise.
//!
//! The crate simulates the finite-population team game and its mean-field
//! limit, builds the lifted mean field Markov game (MFMG) whose state is the
//! joint law of team states, evaluates policies by Monte Carlo at level 0 and
//! by dynamic programming at level 1, translates policies between the two
//! levels, and searches for Nash equilibria with exploitability certificates.
//!
//! ## Modules
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`prob`] | pmfs over finite products, perturbed measures, inverse-CDF sampling, disintegration |
//! | [`model`] | MFTG instances, the seeded noise architecture, drift-of-intentions models |
//! | [`reconstruction`] | the reconstruction map Ξ and admissibility of level-1 actions |
//! | [`population`] | N-agent simulation and exact mean-field (level-0) tracking |
//! | [`lifted`] | lifted state spaces, transition kernels, lifted costs, value iteration |
//! | [`equilibrium`] | exploitability, best-response dynamics, fictitious play |
//! | [`bridge`] | level-0 ↔ level-1 policy correspondence and value equivalence |
//! | [`experiments`] | subcommand drivers emitting CSV and JSON outputs |
//!
//! All randomness flows from a master seed through counter-based streams, so
//! every run is a pure function of its configuration.

pub mod bridge;
pub mod equilibrium;
pub mod error;
pub mod experiments;
pub mod lifted;
pub mod model;
pub mod output;
pub mod population;
pub mod prob;
pub mod reconstruction;

pub use error::{Error, Result};

/// Upper bound on the number of entries of any dense law.
pub const MAX_DENSE_ENTRIES: usize = 1_000_000;
