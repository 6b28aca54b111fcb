use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, GaussianMixture};
use crate::numerics::AdamConfig;
use crate::objectives::{Granularity, LossConfig};
use crate::preference::{LabelMode, RewardFitConfig, RewardSpec};
use crate::{Error, Result};

/// Where preference labels come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ProxySpec {
    /// Label directly with a synthetic reward.
    Reward { reward: RewardSpec },
    /// Fit a Bradley-Terry model on `pairs` reference samples labelled by
    /// `reward`, then label with the model.
    Learned {
        reward: RewardSpec,
        pairs: usize,
        fit: RewardFitConfig,
    },
}

impl ProxySpec {
    pub fn reward(&self) -> &RewardSpec {
        match self {
            ProxySpec::Reward { reward } | ProxySpec::Learned { reward, .. } => reward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub iterations: usize,
    /// New labelled pairs sampled from the policy per iteration.
    pub pairs_per_iteration: usize,
    /// Pairs sampled from the reference before the first iteration; the
    /// whole dataset for offline runs.
    pub initial_pairs: usize,
    /// Optimizer steps per iteration.
    pub updates_per_iteration: usize,
    /// Pairs per optimizer step, drawn uniformly from the dataset.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub dataset: DatasetKind,
    pub proxy: ProxySpec,
    pub true_reward: RewardSpec,
    pub label_mode: LabelMode,
    pub online: bool,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many iterations.
    pub eval_every: usize,
    /// Policy samples per evaluation.
    pub eval_samples: usize,
}

impl RunConfig {
    /// Mode-seeking proxy toward the first mixture center, realism as the
    /// true reward.
    pub fn mixture_defaults(loss: LossConfig) -> Self {
        let mix = GaussianMixture::four_modes();
        Self {
            online: loss.variant.supports_online(),
            initial_pairs: if loss.variant.supports_online() { 0 } else { 512 },
            loss,
            iterations: 200,
            pairs_per_iteration: 8,
            updates_per_iteration: 1,
            batch_size: 16,
            optimizer: AdamConfig {
                clip_norm: Some(1.0),
                ..AdamConfig::with_lr(5e-4)
            },
            dataset: DatasetKind::Mixture4,
            proxy: ProxySpec::Reward {
                reward: RewardSpec::ModeSeeking {
                    target: mix.centers[0].clone(),
                },
            },
            true_reward: RewardSpec::NearestMode { centers: mix.centers },
            label_mode: LabelMode::Stochastic,
            seed: 0,
            eval_every: 5,
            eval_samples: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("iterations", self.iterations),
            ("updates_per_iteration", self.updates_per_iteration),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let granularity = self.loss.variant.granularity();
        if granularity == Granularity::Bandit {
            return Err(Error::config(
                "dpo-bandit acts on a tabular policy; use the bandit toy instead of the diffusion trainer",
            ));
        }
        if self.online && !self.loss.variant.supports_online() {
            return Err(Error::config(format!(
                "{} is trained offline on a fixed pre-labelled dataset; set online = false",
                self.loss.variant
            )));
        }
        if self.online && self.pairs_per_iteration == 0 {
            return Err(Error::config("online runs need pairs_per_iteration > 0"));
        }
        if !self.online && self.initial_pairs == 0 {
            return Err(Error::config("offline runs need initial_pairs > 0"));
        }
        if self.optimizer.lr < 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}
