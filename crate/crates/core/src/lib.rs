//! Beta process factor analysis with stochastic variational inference.
//!
//! Five local inference strategies share one global update: mean-field SVI,
//! mean-field structured SVI, Titsias structured SVI, Mimno's Gibbs-in-SVI and
//! Gibbs structured SVI. A full uncollapsed Gibbs sampler serves as a baseline.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gibbs_baseline;
pub mod local;
pub mod math;
pub mod model;
pub mod rng;
pub mod variational;

pub use error::{BpfaError, Result};
pub use local::{GibbsKernel, GibbsOptions, LocalOptions, LocalVariationalParams, Strategy};
pub use model::{Dataset, GlobalSample, Hyperparameters, LocalSample};
pub use variational::{GlobalMoments, GlobalVariationalState, NaturalStats};
