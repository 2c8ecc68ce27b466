//! Benchmark of model-based and data-driven classifiers for sequences drawn
//! from two linear Gaussian state-space models.
//!
//! * [`ssm`]: model parameters, simulation and labeled datasets.
//! * [`kalman`]: Kalman filter, innovations log-likelihood and RTS smoother.
//! * [`em`]: EM parameter estimation with random restarts.
//! * [`classify`]: likelihood-ratio classifiers and accuracy.
//! * [`lstm`]: from-scratch LSTM sequence classifier.
//! * [`experiments`]: Monte Carlo sweeps and their output files.

pub mod classify;
pub mod em;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod kalman;
pub mod linalg;
pub mod lstm;
pub mod rng;
pub mod ssm;
pub mod textfmt;

pub use error::{Error, Result};
pub use rng::Seed;
pub use ssm::{Dataset, Label, LabeledSequence, ModelParams};
