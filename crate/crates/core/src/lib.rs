//! Post-hoc uncertainty for frozen image-to-image models.
//!
//! A small "identity cap" network is trained on the outputs of a frozen,
//! deterministic base model. It reconstructs the base output and predicts
//! per-pixel generalized Gaussian parameters, from which a calibrated
//! variance map is derived. The crate also ships the baselines (test-time
//! augmentation, MC dropout, constant maps, from-scratch heteroscedastic
//! models), calibration metrics, variance-scaling recalibration, and
//! out-of-distribution detectors used to evaluate the cap, all on synthetic
//! desk-scale restoration tasks.

pub mod adam;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiments;
pub mod ggd;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ood;
pub mod rng;
pub mod special;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
