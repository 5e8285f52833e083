//! Stochastic quantum-trajectory simulation under the nRules: truncated
//! Hamiltonian evolution up to the next ready components, collapse driven by
//! the probability current into them, and relaunch of a new solution from the
//! chosen launch component.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod format;
pub mod hilbert;
pub mod oracle;
pub mod reduction;
pub mod scenarios;

pub use error::{Error, Result};
