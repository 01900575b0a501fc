//! Dual variational Gaussian inference for latent Gaussian models with
//! non-conjugate likelihoods.

pub mod baselines;
pub mod dual;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod sites;
pub mod tasks;

pub use dual::{fit_dual, FitResult};
pub use error::{Error, Result};
pub use model::{Design, GaussianPrior, LgmModel, PosteriorGaussian, PriorCovariance};
pub use optim::{SolverOptions, Termination, Trace, TraceRow};
pub use sites::Site;
