//! Time-domain electromagnetic field solver on the Yee grid.
//!
//! The solver consumes a [`crate::scene::Scene`] rasterized onto a
//! [`crate::mesher::Mesh`]: lossy-dielectric leap-frog updates, convolutional
//! PML absorbing boundaries, Gaussian-excited lumped ports and series R-L-C
//! lumped loads, with per-port voltage/current recording.

mod grid;
mod sim;
mod source;

pub use grid::{rasterize, stable_timestep, LumpedElement, MaterialGrid};
pub use sim::{run_simulation, RunConfig, SimRecord, Simulation, StopReason};
pub use source::{gaussian_excitation, SourceSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("lumped item {index} is not aligned with the mesh: {detail}")]
    LumpedNotAligned { index: usize, detail: String },
    #[error("invalid source spec: {0}")]
    InvalidSource(String),
    #[error("invalid run config: {0}")]
    InvalidRunConfig(String),
    #[error("port index {0} does not exist (grid has {1} ports)")]
    NoSuchPort(usize, usize),
    #[error("mesh is too small for a solver run ({0} lines on axis {1})")]
    GridTooSmall(usize, usize),
}
