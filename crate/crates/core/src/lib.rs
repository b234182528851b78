//! Numerical toolkit for polygonal multi-bubble solutions of coupled critical
//! Schrodinger systems: bubbles, ansatz residuals, weighted norms, the
//! finite-dimensional reduction and Pohozaev checks.

pub mod bubbles;
pub mod cli;
pub mod correction;
pub mod error;
pub mod field;
pub mod geometry;
pub mod norms;
pub mod pohozaev;
pub mod potentials;
pub mod quadrature;
pub mod reduction;
pub mod residual;

pub use error::{Error, Result};
