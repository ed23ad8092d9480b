//! Matrix-free toolkit for studying spectral universality of regularized
//! least squares under structured sensing ensembles.
//!
//! The crate is organised bottom-up:
//!
//! * [`transforms`]: orthogonal building blocks (Walsh–Hadamard, DCT, signs,
//!   permutations) behind the [`LinearOperator`] trait.
//! * [`ensembles`]: samplers for the sensing ensembles and their target
//!   spectral measures.
//! * [`universality`]: finite-N diagnostics for universality-class and
//!   semi-random conditions.
//! * [`regularization`] and [`solver`]: convex penalties, proximal maps and
//!   the proximal gradient method.
//! * [`dynamics`]: GFOM / VAMP engines and their state evolution.
//! * [`experiments`]: config-driven experiment suites with deterministic
//!   CSV/JSON output.

pub mod dynamics;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod regularization;
pub mod rng;
pub mod selftest;
pub mod solver;
pub mod transforms;
pub mod universality;

pub use error::{Error, Result};
pub use rng::Seed;
pub use transforms::{LinearOperator, Op};
