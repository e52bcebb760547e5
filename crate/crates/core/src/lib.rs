//! Bayesian variable selection for the linear model with a Dirichlet-process
//! location mixture for the residuals and a hyper-g prior on the coefficients.

pub mod diagnostics;
pub mod dp;
pub mod error;
pub mod evidence;
pub mod io;
pub mod linalg;
pub mod partitions;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod ssvs;
pub mod trajectory;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    Allocation, ChainState, Dataset, InclusionVector, RawTable, ResidualModel, SamplerConfig,
    StickState, Validated,
};
