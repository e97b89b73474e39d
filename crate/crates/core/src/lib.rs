//! Variational conditional sampling from residual normalizing flows.
//!
//! Given a flow `y = f(x)` and an observed sub-vector `y^O`, the library fits a
//! Gaussian posterior over the hidden latent coordinates `x^H`, solves the
//! constraint `f^O(x^O; x^H) = y^O` for the remaining latent coordinates, and
//! pushes the result through the flow to produce completions `y^H`.

pub mod checks;
pub mod error;
pub mod flows;
pub mod linalg;
pub mod numerics;
pub mod oracle;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod solvers;
pub mod training;
pub mod viscos;

pub use error::{Error, Result};
pub use flows::Flow;
pub use linalg::{LinearOperator, Matrix, Vector};
