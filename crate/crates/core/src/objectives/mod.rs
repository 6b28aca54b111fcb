//! The preference-optimization loss family.
//!
//! Every objective is a `-log sigma(z)` of some log-ratio margin `z`; the
//! variants differ in what the margin is built from:
//!
//! | variant               | margin built from                               |
//! |-----------------------|-------------------------------------------------|
//! | `dpo-bandit`          | action log-ratios of a discrete policy          |
//! | `d3po-step`           | one denoising step of a winner/loser chain pair |
//! | `spo-step`            | one denoising step from a shared noisy state    |
//! | `see-step`            | as `d3po-step`, flattened reference             |
//! | `diffusion-dpo-noise` | noise-prediction errors at a sampled `t`        |
//! | `see-noise-a`         | as above, policy errors scaled by `1 + gamma`   |
//! | `see-noise-b`         | as above, reference errors scaled by `1/(1+gamma)` |
//!
//! The self-entropy weight `gamma` enters every step form as
//! `beta (1 + gamma) [(log pi_w - log ref_w / (1 + gamma)) - (log pi_l - log ref_l / (1 + gamma))]`,
//! i.e. the reference is raised to the power `1 / (1 + gamma)`.

mod bandit;
mod kl;
mod noise;
mod step;

pub use bandit::{
    closed_form_policy, dpo_bandit_loss, flatten_distribution, implied_reward, log_partition_function,
    partition_function, regularized_objective, see_bandit_loss, total_variation, DiscretePolicy,
};
pub use kl::{gaussian_kl, gaussian_kl_equal_var, kl_to_reference, KlEstimate};
pub use noise::{
    diffusion_dpo_noise_loss, draw_noise, noise_loss_with_draws, see_noise_loss_a, see_noise_loss_a_with_draws,
    see_noise_loss_b, see_noise_loss_b_with_draws, NoiseDraw, NoiseForm,
};
pub use step::{
    chain_log_ratios, d3po_step_loss, d3po_step_loss_cached, full_chain_loss, shared_state_step_loss,
    step_loss_from_logprobs, step_margin, stepwise_bound_loss, ReferenceCache, StepLogProbs, StepPair,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "dpo-bandit")]
    DpoBandit,
    #[serde(rename = "d3po-step")]
    D3poStep,
    #[serde(rename = "diffusion-dpo-noise")]
    DiffusionDpoNoise,
    #[serde(rename = "spo-step")]
    SpoStep,
    #[serde(rename = "see-step")]
    SeeStep,
    #[serde(rename = "see-noise-A", alias = "see-noise-a")]
    SeeNoiseA,
    #[serde(rename = "see-noise-B", alias = "see-noise-b")]
    SeeNoiseB,
}

/// How a variant consumes samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// Action pairs of a tabular policy.
    Bandit,
    /// Whole winner/loser chains, one step per update term.
    Chain,
    /// Two continuations of one shared noisy state.
    SharedState,
    /// Clean winner/loser samples re-noised at a random `t`.
    Noise,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::DpoBandit,
        Variant::D3poStep,
        Variant::DiffusionDpoNoise,
        Variant::SpoStep,
        Variant::SeeStep,
        Variant::SeeNoiseA,
        Variant::SeeNoiseB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DpoBandit => "dpo-bandit",
            Variant::D3poStep => "d3po-step",
            Variant::DiffusionDpoNoise => "diffusion-dpo-noise",
            Variant::SpoStep => "spo-step",
            Variant::SeeStep => "see-step",
            Variant::SeeNoiseA => "see-noise-A",
            Variant::SeeNoiseB => "see-noise-B",
        }
    }

    pub fn is_see(self) -> bool {
        matches!(self, Variant::SeeStep | Variant::SeeNoiseA | Variant::SeeNoiseB)
    }

    /// The plain objective a SEE variant extends (itself for the others).
    pub fn base(self) -> Variant {
        match self {
            Variant::SeeStep => Variant::D3poStep,
            Variant::SeeNoiseA | Variant::SeeNoiseB => Variant::DiffusionDpoNoise,
            other => other,
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Variant::DpoBandit => Granularity::Bandit,
            Variant::D3poStep | Variant::SeeStep => Granularity::Chain,
            Variant::SpoStep => Granularity::SharedState,
            Variant::DiffusionDpoNoise | Variant::SeeNoiseA | Variant::SeeNoiseB => Granularity::Noise,
        }
    }

    /// Noise-space objectives are trained on a fixed, pre-labelled dataset.
    pub fn supports_online(self) -> bool {
        self.granularity() != Granularity::Noise
    }

    /// Whether `beta` is multiplied by `T` inside the loss.
    pub fn scales_beta_by_t(self) -> bool {
        self.granularity() == Granularity::Noise
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!(
                    "unknown loss variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: Variant,
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(rename = "T")]
    pub total_steps: usize,
}

impl LossConfig {
    pub fn new(variant: Variant, beta: f64, gamma: f64, total_steps: usize) -> Result<Self> {
        let cfg = Self {
            variant,
            beta,
            gamma,
            total_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(self.gamma > -1.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be finite and > -1, got {}",
                self.gamma
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("T must be positive"));
        }
        Ok(())
    }

    /// For a SEE variant at `gamma = 0`, the base-variant config it is
    /// equivalent to.
    pub fn base_equivalent(&self) -> Option<LossConfig> {
        (self.variant.is_see() && self.gamma == 0.0).then(|| LossConfig {
            variant: self.variant.base(),
            ..self.clone()
        })
    }

    /// Sets `gamma`; a non-zero value moves a plain chain or noise objective
    /// to its SEE form (`d3po-step` to `see-step`, `diffusion-dpo-noise` to
    /// `see-noise-A`).
    pub fn with_gamma(&self, gamma: f64) -> LossConfig {
        let variant = match self.variant {
            Variant::D3poStep if gamma != 0.0 => Variant::SeeStep,
            Variant::DiffusionDpoNoise if gamma != 0.0 => Variant::SeeNoiseA,
            v => v,
        };
        LossConfig {
            variant,
            gamma,
            ..self.clone()
        }
    }

    pub fn with_beta(&self, beta: f64) -> LossConfig {
        LossConfig { beta, ..self.clone() }
    }

    /// The coefficient that actually multiplies the margin: `beta T` for the
    /// noise objectives, `beta` otherwise.
    pub fn effective_beta(&self) -> f64 {
        if self.variant.scales_beta_by_t() {
            self.beta * self.total_steps as f64
        } else {
            self.beta
        }
    }
}
