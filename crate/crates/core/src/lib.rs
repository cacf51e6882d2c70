//! Numerical toolkit for nonuniform mu-dichotomies of linear delay equations
//! and the smooth linearization of their perturbations.

pub mod admissibility;
pub mod conjugacy;
pub mod dde;
pub mod dichotomy;
pub mod error;
pub mod expr;
pub mod growth_rate;
pub mod perturbation;
pub mod phase_space;
pub mod quadrature;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};
