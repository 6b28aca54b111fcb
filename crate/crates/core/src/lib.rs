//! Preference optimization for small diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: seeded RNG streams, a hand-differentiated MLP, Adam and a
//!   finite-difference gradient checker.
//! - [`diffusion`]: variance-preserving schedules, forward noising, the
//!   reverse Markov chain and the epsilon-prediction pretraining loss.
//! - [`data`]: the two toy datasets (a 2-D Gaussian mixture and 8x8 blob
//!   images).
//! - [`preference`]: synthetic rewards, Bradley-Terry labelling and reward
//!   model training (clean and timestep-conditioned).
//! - [`objectives`]: the DPO loss family for diffusion models (bandit,
//!   step-wise, noise-space) with the self-entropy flattened reference.
//! - [`metrics`]: RMSE/PSNR/SSIM, histogram entropies and mode coverage.
//! - [`trainer`]: the online iterative loop, reward-hacking detection, the
//!   tabular bandit toy and parameter sweeps.
//! - [`conformance`]: a registry of numerical properties checked against
//!   independent oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformance;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod preference;
pub mod trainer;

pub use error::{Error, Result};
