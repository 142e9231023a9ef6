//! Fixed-domain solvers and control synthesis for the one-phase Stefan
//! problem with a Dirichlet boundary control.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: grids, quadrature, traces, bordered tridiagonal solves.
//! * [`transform`]: physical front ↔ cylinder ↔ perturbation coordinates.
//! * [`weights`]: Carleman weight families and their bound checks.
//! * [`stefan_forward`]: cylinder solver, similarity solution, references,
//!   and the nonlinear perturbation system on `(−1, 1)`.
//! * [`linear_system`]: the linearized state system.
//! * [`adjoint`]: backward adjoint solvers and the duality check.
//! * [`carleman_verify`]: both sides of the Carleman estimates on discrete solutions.
//! * [`hum`]: weighted null control of the linearized system.
//! * [`nonlinear_control`]: the fixed-point loop and target verification.
//! * [`cli`]: run configuration and the subcommands behind the binary.

pub mod error;
pub mod numerics;
pub mod transform;
pub mod weights;
pub mod stefan_forward;
pub mod linear_system;
pub mod adjoint;
pub mod carleman_verify;
pub mod hum;
pub mod nonlinear_control;
pub mod cli;

pub use error::{Error, Result};
