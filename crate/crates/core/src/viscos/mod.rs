//! Variational conditioning: posterior family, ELBO, log-determinant gradients
//! and the fitting loop.

pub mod amortized;
pub mod elbo;
pub mod fit;
pub mod lad;
pub mod posterior;

pub use amortized::{amortized_infer, InferenceNetwork};
pub use elbo::{
    elbo_estimate, implicit_grad_xo, partitioned_joint_logpdf, sample_gradient, ElboEstimate, GradientConfig,
    GradientForm, SolverSettings,
};
pub use fit::{conditional_sample, fit_conditional, ConditioningReport, FitConfig, PartitionPolicy};
pub use lad::{clade_grad, nlade_grad, BlockSolverConfig, LadEstimator};
pub use posterior::{posterior_sample, PosteriorDocument, VariationalPosterior};
