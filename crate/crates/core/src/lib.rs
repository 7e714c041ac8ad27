//! Numerical laboratory for anisotropic type-I blow-up of
//! `u_t = Δu + |u|^{p-1}u` in four space dimensions, `p > 5`.
//!
//! The pipeline runs in order: radial self-similar profile, spectrum of the
//! linearised operator, weighted elliptic inverse, approximate-solution
//! hierarchy, and a modulated simulation in self-similar variables.

// Negated comparisons reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Grid loops index several arrays in lockstep.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod corrector;
pub mod elliptic_inverter;
pub mod error;
pub mod io;
pub mod linalg;
pub mod ode;
pub mod profile_solver;
pub mod scalar;
pub mod simulator;
pub mod spectral;
pub mod verify;
pub mod weighted_spaces;

pub use error::{LabError, Result};
pub use scalar::Real;

pub type RadialGrid64 = weighted_spaces::RadialGrid<f64>;
pub type RadialGrid32 = weighted_spaces::RadialGrid<f32>;
pub type CylGrid64 = weighted_spaces::CylGrid<f64>;
pub type CylGrid32 = weighted_spaces::CylGrid<f32>;
pub type GridFunction64 = weighted_spaces::GridFunction<f64>;
pub type GridFunction32 = weighted_spaces::GridFunction<f32>;
