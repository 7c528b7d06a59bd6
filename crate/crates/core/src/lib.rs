//! Simulation and estimation of continuous-time marginal structural models with an
//! unmeasured binary confounder.
//!
//! Trajectories are generated from state-dependent intensity processes, stabilized
//! inverse-probability-of-treatment weights reweight them toward an experimental world,
//! and the exposure-kernel MSM is fit under five estimation strategies, one of which
//! sums the latent confounder out of the observational likelihood and propagates
//! posterior uncertainty through Bayesian-bootstrap weighted fits.

pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod intensity;
pub mod io;
pub mod msm;
pub mod optim;
pub mod params;
pub mod paths;
pub mod posterior;
pub mod rng;
pub mod scenario;
pub mod simulator;
pub mod stats;
pub mod study;
pub mod weights;

pub use error::{Error, Result};
