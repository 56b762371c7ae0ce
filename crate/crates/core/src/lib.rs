//! System identification by tuning a moving horizon estimator.
//!
//! The data are cut into windows of `m` samples. On each window a moving horizon
//! estimator with a constant arrival cost estimates the state trajectory from the first
//! `m - 1` outputs, and the estimate of the last state predicts the `m`-th output. The
//! model parameters `theta` and the arrival-cost parameters `eta` are tuned jointly to
//! minimize the mean squared one-step-ahead prediction error.
//!
//! * [`model`]: the model contract and the built-in models.
//! * [`arrival`]: the arrival cost and its unconstrained parameterization.
//! * [`data`]: trajectories, windows and file formats.
//! * [`mhe`]: the per-window estimator.
//! * [`sensitivity`]: derivatives of the per-window prediction error.
//! * [`pem`]: the outer Levenberg-Marquardt identification loop.
//! * [`sim`]: seeded data generators.

pub mod arrival;
pub mod data;
pub mod error;
pub mod mhe;
pub mod model;
pub mod pem;
pub mod sensitivity;
pub mod sim;

pub use arrival::{ArrivalMode, ArrivalParams};
pub use data::{extract_windows, Trajectory, Window};
pub use error::{Error, Result};
pub use mhe::{MheOptions, MheSolution};
pub use model::{builtin_model, ParametricModel};
pub use pem::{evaluate_objective, identify, IdentificationResult, PemOptions};
