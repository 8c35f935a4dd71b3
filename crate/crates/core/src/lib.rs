//! Quasi-local integrals of motion for strongly disordered spin chains.
//!
//! The crate builds, for a chain `H = Σ_i (h_i Z_i + J V_i)` with uniform
//! random fields, an inductive quasi-diagonalization up to a coupling-
//! dependent order `n*`, assembles the dressed spin operators that are
//! quasi-conserved under `H`, constructs the almost-conserved observable
//! that bounds energy transport across a cut, and verifies the whole
//! construction against an exact-diagonalization oracle plus Monte Carlo
//! disorder statistics.
//!
//! Modules
//! - [`opalg`]: interval-anchored dense operator algebra (the substrate).
//! - [`model`]: parameters, disorder sampling, resonance decisions.
//! - [`kam`]: the scale-by-scale diagonalization scheme and exact remainder.
//! - [`lioms`]: resonant clusters, cluster Hamiltonians, dressed spins.
//! - [`transport`]: energy current, the cut observable, exact dynamics.
//! - [`verify`]: oracle and statistics suites producing pass/fail records.

extern crate blas_src;

pub mod kam;
pub mod linalg;
pub mod lioms;
pub mod model;
pub mod opalg;
pub mod transport;
pub mod verify;

pub use linalg::{C64, Mat};
pub use model::{ChainParams, FieldRealization};
