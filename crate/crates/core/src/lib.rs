//! Multi-view transductive additive models.
//!
//! Each view (a feature matrix or an observed graph) becomes a linear
//! smoother over all labeled and unlabeled observations. Models are fit by
//! self-training to the fixed point `Y_U = eta_U(Y_U)`: backfitting for
//! regression, local scoring for binary classification. Views are selected
//! with transductive GCV and AIC criteria.

pub mod additive;
pub mod cli;
pub mod error;
pub mod fixedpoint;
pub mod lattice;
pub mod linalg;
pub mod modelsel;
pub mod smoother;
pub mod views;

pub use error::{Error, Result};
