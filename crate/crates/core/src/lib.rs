//! Numerical laboratory for the damped stochastic Kuramoto–Sivashinsky
//! equation `u_t + au + u_xxxx + uu_x = h + η` on a large periodic box.
//!
//! The crate covers the spectral discretization, an exponential integrator,
//! the coupled auxiliary processes used to study mixing, weighted energy
//! functionals and stopping times, Monte-Carlo mixing statistics, and an
//! abstract stopping-time ladder over toy couplings.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coupling;
pub mod criterion;
pub mod dynamics;
pub mod error;
pub mod functionals;
pub mod io;
pub mod mixing;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{LabError, Result};
pub use spectral::{make_grid, Field, Grid};
