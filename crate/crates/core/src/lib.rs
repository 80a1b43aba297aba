//! Optimal control of spin-1/2 particles in Rashba and Zeeman fields, both as
//! classical spin-orbit trajectories and as matrix-valued Wigner functions on a
//! periodic phase-space grid.

pub mod classical;
pub mod cli;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod fields;
pub mod io;
pub mod optimize;
#[cfg(feature = "oracles")]
pub mod oracles;
pub mod quantum;
pub mod spectral;
pub mod wigner;

pub use error::{Error, Result};
