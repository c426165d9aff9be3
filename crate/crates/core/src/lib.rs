//! Numerical laboratory for the effective dynamics of many-boson systems.
//!
//! The crate pairs the one-particle effective equations (Hartree,
//! Gross-Pitaevskii, semi-relativistic Hartree) with exact small-scale
//! many-body dynamics on a periodic lattice, so that convergence of reduced
//! densities toward the mean-field flow can be measured directly.
//!
//! Modules, bottom up:
//!
//! - [`lattice`]: grid, spectral one-body operators, kernels, Sobolev norms.
//! - [`solvers`]: time integration of the effective equations.
//! - [`scattering`]: zero-energy radial scattering and the scattering length.
//! - [`manybody`]: occupation-number bases, mean-field Hamiltonians, exact
//!   propagation, reduced densities and trace distances.
//! - [`bbgky`]: the finite hierarchy for reduced densities and the residual
//!   of the infinite hierarchy on factorized states.
//! - [`fock`]: truncated Fock space, ladder operators, coherent states and
//!   the fluctuation dynamics.
//! - [`harness`]: experiment specs, result tables and rate fitting.

pub mod bbgky;
pub mod error;
pub mod fock;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod manybody;
pub mod scattering;
pub mod solvers;

pub use error::{LabError, Result};
pub use lattice::{Grid, Kernel, Multiplier, WaveFunction, C64};
