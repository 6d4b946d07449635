//! Conformalized adaptive forecasting for heterogeneous trajectories.
//!
//! Online adaptive bands (ACI or conformal-PID quantile tracking) are built
//! along each trajectory and then conformalized over exchangeable
//! calibration trajectories, giving finite-sample simultaneous coverage of
//! entire test trajectories.

pub mod adaptive;
pub mod baselines;
pub mod conformal;
pub mod error;
pub mod experiments;
pub mod forecaster;
pub mod io;
pub mod multistep;
pub mod pipeline;
pub mod quantile;
pub mod report;
pub mod simdata;
pub mod special;
pub mod trajectory;
pub mod tuning;

pub use error::{Error, Result};
