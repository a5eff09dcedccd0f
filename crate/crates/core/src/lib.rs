//! epifuse: a multi-region compartmental HIV epidemic engine with a
//! multi-source Bayesian observation model.
//!
//! The crate projects a spatially coupled susceptible/untreated/on-ART
//! compartmental model forward in time, evaluates the joint likelihood of
//! household surveys, ANC sentinel surveillance, recency assays and facility
//! ART patient counts against the projected trajectories, and recovers the
//! generating parameters by MAP optimization followed by adaptive MCMC.
//!
//! Main pieces:
//! - [`graph`]: areal units, adjacency, border-crossing distances, mixing weights.
//! - [`spline`]: B-spline bases for the time-varying transmission and ART
//!   initiation rates.
//! - [`engine`]: forward-Euler projection of the compartmental system.
//! - [`obs`]: observation distributions, cross-region treatment seeking and
//!   the joint log-likelihood.
//! - [`inference`]: priors, posterior gradients (forward-mode dual numbers),
//!   L-BFGS MAP fitting with a Laplace covariance, adaptive Metropolis
//!   sampling and posterior summaries.
//! - [`synth`]: synthetic ground-truth scenarios and simulated observation
//!   sets for end-to-end parameter-recovery testing.
//! - [`io`]: CSV/JSON readers and writers for every file the pipeline touches.

pub mod engine;
pub mod error;
pub mod graph;
pub mod inference;
pub mod io;
pub mod obs;
pub mod params;
pub mod scalar;
pub mod spline;
pub mod synth;

pub use error::{Error, Result};
