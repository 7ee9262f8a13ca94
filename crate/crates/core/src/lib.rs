//! Long-horizon multivariate time-series forecasting with a time-index
//! formulation: an encoder simulates the latent derivative of the series, a
//! patched Euler solver integrates it, and a per-window closed-form ridge
//! decoder maps the integral back to observation space as deltas from the
//! last observed value.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), feature construction ([`features`]), the model itself
//! ([`encoder`], [`solver`], [`decoder`], [`model`]), training and
//! evaluation ([`trainer`], [`losses`], [`data`], [`baselines`]), and
//! experiment plumbing ([`config`], [`experiment`]). Reference
//! implementations for cross-checking live in [`oracles`].

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod oracles;
pub mod params;
pub mod rng;
pub mod solver;
pub mod trainer;

pub use autodiff::{Graph, Tensor};
pub use data::{ForecastWindow, TimeSeriesDataset};
pub use error::{Error, Result};
pub use model::{ModelConfig, PdeTime, Variant};
pub use trainer::{Checkpoint, TrainConfig};
