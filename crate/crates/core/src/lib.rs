//! Branching Brownian motion: genealogies, extremal clusters and their limits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbm;
pub mod cluster_law;
pub mod drw;
pub mod error;
pub mod experiments;
pub mod extremal;
pub mod genealogy;
pub mod harness;
pub mod limit;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
