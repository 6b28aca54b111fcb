//! The TOML experiment file.
//!
//! Only `dataset` is required. Every section falls back to the desk
//! experiment defaults, and unknown keys are rejected so that typos surface
//! with their location.

use std::path::{Path, PathBuf};

use prefdiff::data::{DatasetKind, GaussianMixture};
use prefdiff::diffusion::{DiffusionSchedule, PretrainConfig, ScheduleKind};
use prefdiff::numerics::{AdamConfig, Architecture};
use prefdiff::objectives::{LossConfig, Variant};
use prefdiff::preference::{LabelMode, RewardSpec};
use prefdiff::trainer::{
    BanditToyConfig, ProxySpec, RunConfig, BANDIT_GAMMAS, DESK_BETA, DESK_GAMMAS, DESK_REFERENCE_SEED, DESK_STEPS,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub toy: ToySection,
}

fn default_seed() -> u64 {
    DESK_REFERENCE_SEED
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: DESK_STEPS,
            kind: ScheduleKind::Linear,
        }
    }
}

/// Fine-tuning settings. `proxy` and `true_reward` default to the
/// mode-seeking proxy and realism reward on the mixture; image runs must
/// set both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variant: Variant,
    pub beta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub pairs_per_iteration: usize,
    pub initial_pairs: usize,
    pub updates_per_iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub label_mode: LabelMode,
    pub online: bool,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub proxy: Option<ProxySpec>,
    pub true_reward: Option<RewardSpec>,
}

impl Default for RunSection {
    fn default() -> Self {
        let loss = LossConfig::new(Variant::D3poStep, DESK_BETA, 0.0, DESK_STEPS).expect("desk loss is valid");
        let base = RunConfig::mixture_defaults(loss);
        Self {
            variant: base.loss.variant,
            beta: base.loss.beta,
            gamma: base.loss.gamma,
            iterations: base.iterations,
            pairs_per_iteration: base.pairs_per_iteration,
            initial_pairs: base.initial_pairs,
            updates_per_iteration: base.updates_per_iteration,
            batch_size: base.batch_size,
            lr: base.optimizer.lr,
            clip_norm: base.optimizer.clip_norm,
            label_mode: base.label_mode,
            online: base.online,
            eval_every: base.eval_every,
            eval_samples: base.eval_samples,
            proxy: None,
            true_reward: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            gammas: DESK_GAMMAS.to_vec(),
            betas: vec![0.01, 0.1, 1.0, 4.0],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub p_ref: Vec<f64>,
    pub rewards: Vec<f64>,
    pub beta: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ToySection {
    fn default() -> Self {
        let base = BanditToyConfig::default();
        Self {
            p_ref: base.p_ref,
            rewards: base.rewards,
            beta: base.beta,
            lr: base.lr,
            clip_norm: base.clip_norm,
            batch: base.batch,
            steps: base.steps,
            gammas: BANDIT_GAMMAS.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mixture4,
            seed: default_seed(),
            output_dir: default_output_dir(),
            schedule: ScheduleSection::default(),
            model: Architecture::default(),
            pretrain: PretrainConfig::default(),
            run: RunSection::default(),
            sweep: SweepSection::default(),
            toy: ToySection::default(),
        }
    }
}

impl ExperimentConfig {
    #[cfg(test)]
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Config(format!("config file {} does not exist", path.display()))
            } else {
                CliError::Io(format!("{}: {e}", path.display()))
            }
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, CliError> {
        DiffusionSchedule::new(self.schedule.steps, self.schedule.kind)
            .map_err(|e| CliError::Config(format!("schedule: {e}")))
    }

    /// The trainer configuration for the `run` section at `gamma`, `beta`
    /// and `seed`.
    pub fn run_config(&self, gamma: f64, beta: f64, seed: u64) -> Result<RunConfig, CliError> {
        let run = &self.run;
        let field = |name: &str, e: prefdiff::Error| CliError::Config(format!("run.{name}: {}", reason(e)));
        let loss = LossConfig::new(run.variant, beta, 0.0, self.schedule.steps)
            .map_err(|e| field("variant", e))?
            .with_gamma(gamma);
        let (proxy, true_reward) = match (self.dataset, &run.proxy, &run.true_reward) {
            (_, Some(p), Some(t)) => (p.clone(), t.clone()),
            (DatasetKind::Mixture4, p, t) => {
                let mix = GaussianMixture::four_modes();
                let proxy = p.clone().unwrap_or(ProxySpec::Reward {
                    reward: RewardSpec::ModeSeeking {
                        target: mix.centers[0].clone(),
                    },
                });
                let truth = t.clone().unwrap_or(RewardSpec::NearestMode { centers: mix.centers });
                (proxy, truth)
            }
            (DatasetKind::Blobs8x8, p, _) => {
                let missing = if p.is_none() { "run.proxy" } else { "run.true_reward" };
                return Err(CliError::Config(format!(
                    "{missing} must be set for the blobs8x8 dataset"
                )));
            }
        };
        let config = RunConfig {
            loss,
            iterations: run.iterations,
            pairs_per_iteration: run.pairs_per_iteration,
            initial_pairs: run.initial_pairs,
            updates_per_iteration: run.updates_per_iteration,
            batch_size: run.batch_size,
            optimizer: AdamConfig {
                clip_norm: run.clip_norm,
                ..AdamConfig::with_lr(run.lr)
            },
            dataset: self.dataset,
            proxy,
            true_reward,
            label_mode: run.label_mode,
            online: run.online,
            seed,
            eval_every: run.eval_every,
            eval_samples: run.eval_samples,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(format!("run: {}", reason(e))))?;
        Ok(config)
    }

    pub fn toy_config(&self, seed: u64) -> Result<BanditToyConfig, CliError> {
        let t = &self.toy;
        let config = BanditToyConfig {
            p_ref: t.p_ref.clone(),
            rewards: t.rewards.clone(),
            beta: t.beta,
            lr: t.lr,
            clip_norm: t.clip_norm,
            batch: t.batch,
            steps: t.steps,
            seed,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(format!("toy: {}", reason(e))))?;
        Ok(config)
    }
}

fn reason(e: prefdiff::Error) -> String {
    match e {
        prefdiff::Error::Config(m) => m,
        other => other.to_string(),
    }
}
