//! Online preference fine-tuning, reward-hacking instrumentation, the
//! tabular exploration toy and parameter sweeps.

mod bandit;
mod config;
mod desk;
mod log;
mod online;
mod sweep;

pub use bandit::{run_bandit_toy, time_to_mass, BanditCurve, BanditToyConfig, BANDIT_GAMMAS};
pub use config::{ProxySpec, RunConfig};
pub use desk::{
    desk_config, desk_schedule, pretrain_reference, DESK_BETA, DESK_GAMMAS, DESK_REFERENCE_SEED, DESK_STEPS,
    DESK_WINDOW,
};
pub use log::{detect_reward_hacking, least_squares_slope, HackingReport, LogRow, RunLog, RUNLOG_SCHEMA};
pub use online::{DatasetEntry, Trainer, TrainerState, CHECKPOINT_SCHEMA};
pub use sweep::{sweep, FinalMetrics, SweepCell, SweepResult, SWEEP_SCHEMA};
