//! Hierarchical neural posterior estimation for models whose observations
//! share global parameters.
//!
//! A posterior over local parameters `alpha` and global parameters `beta`
//! is factorized as `q(alpha | beta, x0) q(beta | x0, X)`, where `X` is a
//! set of auxiliary observations summarized by a permutation-invariant
//! aggregator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod features;
pub mod flows;
pub mod metrics;
pub mod model;
pub mod nmm;
pub mod optim;
pub mod persist;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    derive_seed, seeded_rng, ObservationBundle, ParamSpec, PriorSpec, Rng, Role, SimRecord, SimulatedDataset,
    Simulator, Theta,
};
