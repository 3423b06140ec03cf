//! Numerical laboratory for self-similar blowup in the one-dimensional
//! polyharmonic semilinear heat equation
//!
//!   d/dt u = -(-Lap)^m u + u |u|^(p-1),   m odd, p > 1.
//!
//! In similarity variables centered at a blowup point the equation becomes
//! an autonomous flow with a polynomial eigenbasis, an explicit slowly
//! collapsing profile, and a finite-dimensional unstable manifold. The crate
//! tabulates the fundamental solution of the linear part, evaluates the
//! profile family and its closed-form constants, integrates the rescaled
//! flow, tracks mode amplitudes against the shrinking neighborhood that
//! certifies blowup, and drives the shooting procedure that pins the
//! unstable directions.

pub mod config;
pub mod constants;
pub mod error;
pub mod field;
pub mod kernel;
pub mod modes;
pub mod num;
pub mod profile;
pub mod semigroup;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
