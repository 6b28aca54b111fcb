//! The desk-scale reward-hacking experiment.
//!
//! A 20-step linear schedule on the four-mode mixture. The reference carries
//! a zero-initialized variance head, so it samples with the fixed posterior
//! variance while fine-tuned policies may widen individual steps. Labels are
//! drawn from the Bradley-Terry model of the mode-seeking proxy.

use super::config::RunConfig;
use crate::data::DatasetKind;
use crate::diffusion::{pretrain, DiffusionSchedule, PretrainConfig, PretrainReport, ScheduleKind};
use crate::numerics::{Architecture, Denoiser, RngState};
use crate::objectives::{LossConfig, Variant};
use crate::Result;

pub const DESK_STEPS: usize = 20;
pub const DESK_BETA: f64 = 0.5;
pub const DESK_REFERENCE_SEED: u64 = 7;
/// The ablation grid.
pub const DESK_GAMMAS: [f64; 5] = [-0.5, 0.0, 1.0, 3.0, 5.0];
/// Detector window, in log rows.
pub const DESK_WINDOW: usize = 20;

pub fn desk_schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(DESK_STEPS, ScheduleKind::Linear).expect("desk schedule is valid")
}

/// Pretrains a variance-head reference on `dataset`.
pub fn pretrain_reference(
    dataset: DatasetKind,
    sched: &DiffusionSchedule,
    arch: Architecture,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(Denoiser, PretrainReport)> {
    let data = dataset.build();
    let mut rng = RngState::new(seed);
    let mut model = Denoiser::with_variance_head(data.data_dim(), data.cond_dim(), sched.total_steps(), arch, &mut rng);
    let report = pretrain(sched, &mut model, data.as_ref(), config, &mut rng)?;
    Ok((model, report))
}

/// Online step-wise run at `gamma` with the desk defaults.
pub fn desk_config(gamma: f64, seed: u64) -> Result<RunConfig> {
    let loss = LossConfig::new(Variant::D3poStep, DESK_BETA, 0.0, DESK_STEPS)?.with_gamma(gamma);
    let mut config = RunConfig::mixture_defaults(loss);
    config.seed = seed;
    config.validate()?;
    Ok(config)
}
