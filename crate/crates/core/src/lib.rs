//! Uncertainty-aware prediction of longitudinal treatment outcomes with a
//! latent neural stochastic differential equation.
//!
//! The crate covers the full pipeline:
//!
//! * [`autodiff`] — reverse-mode tape over rank-1/2 f64 arrays;
//! * [`nets`] — MLPs, a gated recurrent encoder cell, parameter store,
//!   Glorot initialization, Adam, and the binary checkpoint container;
//! * [`sim`] — three confounded synthetic data generators (driven pendulum,
//!   cardiovascular fluid response, dexamethasone pharmacodynamics)
//!   integrated with RK4, plus dataset files and train/val/test manifests;
//! * [`model`] — the encoder / latent-SDE / emission architecture with
//!   Monte-Carlo outcome prediction for both treatment arms;
//! * [`train`] — Monte-Carlo variational objective (Gaussian log-likelihood
//!   minus a path-space KL penalty), minibatch Adam training with
//!   validation-based early stopping, and a finite-difference gradient gate;
//! * [`eval`] — RMSE splits, PEHE, uncertainty scoring, trimming curves,
//!   treatment-strategy precision-recall, false-discovery-rate curves and
//!   in/out-of-distribution uncertainty comparison;
//! * [`pipeline`] — file-level orchestration used by the `cfode` binary.

pub mod autodiff;
pub mod model;
pub mod nets;
pub mod sim;
pub mod util;

pub use autodiff::{DiffError, Gradients, Shape, Tape, Tensor};
pub use model::{CfOde, LatentPath, ModelConfig, OutcomePrediction, PathNoise};
pub use nets::{AdamConfig, GruSpec, MlpSpec, ParamStore};
pub use sim::{DatasetKind, Episode, SimConfig};
