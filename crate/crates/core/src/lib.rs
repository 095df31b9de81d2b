//! Bayesian low-rank latent-cluster regression for multivariate mixed-type responses.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod gibbs;
pub mod init;
pub mod interpret;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod mgp;
pub mod model;
pub mod normal_eq;
pub mod numeric;
pub mod psm;
pub mod random;
pub mod selection;
pub mod sim;
pub mod vi;

pub use error::{Error, Result};
