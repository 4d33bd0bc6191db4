//! Bayesian mixed multinomial logit estimation by variational inference.
//!
//! The crate is generic over the floating-point type through [`Scalar`]; the
//! aliases at the bottom of this file fix it to `f64`, which is what the CLI
//! and most callers want.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assessment;
pub mod batch;
pub mod bound;
pub mod conjugate;
pub mod data_io;
pub mod densities;
pub mod error;
pub mod linalg;
pub mod local;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod serde_mat;
pub mod svi;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type.
pub type Real = f64;

pub type Dataset = model::ChoiceDataset<Real>;
pub type Agent = model::AgentData<Real>;
pub type Event = model::ChoiceEvent<Real>;
pub type Priors = model::Hyperpriors<Real>;
pub type Global = model::GlobalVarParams<Real>;
pub type Local = model::LocalVarParams<Real>;
pub type Fit = batch::FitResult<Real>;
pub type Draws = mcmc::PosteriorDraws<Real>;
