//! Simulation platform for the physical layer of coupled reconfigurable
//! intelligent surfaces (RIS).
//!
//! The platform models a pair of RIS panels built from square split ring
//! resonator (S-SRR) unit cells, each hosting a lumped port. A time-domain
//! field solver on a nonuniform rectilinear grid produces per-port voltage
//! and current records, which are post-processed into feed impedances,
//! s-parameters, port powers and resonance reports. A derivative-free
//! optimization loop tunes lumped states (or geometry) to maximize the
//! active-to-passive power transfer.
//!
//! Module map:
//! - [`scene`]: parametric geometry (unit cells, arrays, RIS pairs)
//! - [`mesher`]: nonuniform rectilinear mesh generation and smoothing
//! - [`solver`]: FDTD field solver with CPML boundaries and lumped elements
//! - [`rfanalysis`]: spectra, impedances, s-parameters, powers, resonances
//! - [`optim`]: differential-evolution optimization loop
//! - [`pipeline`]: scenario files, run orchestration, artifact output
//! - [`validation`]: built-in analytic oracle suite

pub mod mesher;
pub mod optim;
pub mod pipeline;
pub mod rfanalysis;
pub mod scene;
pub mod solver;
pub mod validation;

/// Speed of light in vacuum (m/s).
pub const C0: f64 = 299_792_458.0;
/// Vacuum permittivity (F/m).
pub const EPS0: f64 = 8.854_187_812_8e-12;
/// Vacuum permeability (H/m).
pub const MU0: f64 = 1.256_637_062_12e-6;
/// Free-space wave impedance (Ohm).
pub const ETA0: f64 = 376.730_313_668;
