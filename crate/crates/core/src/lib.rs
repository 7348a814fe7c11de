//! Score-based priors for variational inference in computational imaging.

pub mod baselines;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod score;
pub mod variational;
pub mod vi;

pub use error::{Error, Result};
