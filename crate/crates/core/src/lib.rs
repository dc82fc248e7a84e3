//! Robust continuation values, worst-case distortions and their diagnostics
//! for Markov benchmark models on continuous state spaces.

pub mod ddc_solver;
pub mod error;
pub mod ident;
pub mod kernel;
pub mod learning_solver;
pub mod models;
pub mod numgrid;
pub mod perturb;
pub mod pricing;
pub mod robust_solver;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
