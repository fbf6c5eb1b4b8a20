//! Monte Carlo laboratory for subcritical two-dimensional oriented (bond)
//! percolation observed from its rightmost occupied site, together with an
//! exact finite-state oracle for the quasi-stationary law of the anchored
//! process.
//!
//! The crate is organised around four layers:
//!
//! * [`lattice`] — the windowed lattice, sampled bond environments and the
//!   one-level update kernels (forward, backward, coupled);
//! * [`anchored`] — the view from the rightmost point: anchoring, cylinder
//!   projections and the anchored chain driver;
//! * [`qsd`] / [`renewal`] — the two experiment families: quasi-stationary
//!   distributions (exact truncated kernel + conditioned Monte Carlo) and
//!   the renewal-pair decomposition with its tail statistics;
//! * [`stats`] / [`exec`] — counting, confidence intervals, log-linear decay
//!   fits, and the deterministic sequential/parallel trial driver.
//!
//! All randomness flows through per-trial counter-based streams so that every
//! experiment is reproducible bit for bit regardless of thread count.

pub mod anchored;
mod bits;
pub mod cli;
pub mod error;
pub mod exec;
pub mod lattice;
pub mod qsd;
pub mod renewal;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
