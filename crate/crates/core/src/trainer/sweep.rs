use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::desk::DESK_WINDOW;
use super::log::{detect_reward_hacking, LogRow, RunLog};
use super::online::Trainer;
use crate::diffusion::DiffusionSchedule;
use crate::numerics::Denoiser;
use crate::Result;

/// End-of-run summary of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    #[serde(with = "crate::numerics::nonfinite")]
    pub proxy_reward: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub true_reward: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub kl: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub e1: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub e2: f64,
    /// `true_reward + e1`.
    #[serde(with = "crate::numerics::nonfinite")]
    pub composite: f64,
    /// Coverage of the proxy's favoured mode (mixture runs), else NaN.
    #[serde(with = "crate::numerics::nonfinite")]
    pub rewarded_share: f64,
    /// `None` when the log is too short for the detector.
    pub hacking_step: Option<Option<usize>>,
}

impl FinalMetrics {
    pub fn from_log(log: &RunLog) -> Option<Self> {
        let last: &LogRow = log.last()?;
        let hacking_step = detect_reward_hacking(log, DESK_WINDOW).ok().map(|r| r.first_step);
        Some(Self {
            proxy_reward: last.proxy_reward,
            true_reward: last.true_reward,
            kl: last.kl,
            e1: last.e1,
            e2: last.e2,
            composite: last.true_reward + last.e1,
            rewarded_share: last.coverage.first().copied().unwrap_or(f64::NAN),
            hacking_step,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub beta: f64,
    pub seed: u64,
    /// The run's log and summary, or the error that stopped it.
    pub outcome: std::result::Result<(RunLog, FinalMetrics), String>,
}

pub const SWEEP_SCHEMA: &str = "prefdiff.sweep/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by gamma, then beta, then seed, as given.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    pub fn metrics(&self, gamma: f64, beta: f64, seed: u64) -> Option<&FinalMetrics> {
        self.cells
            .iter()
            .find(|c| c.gamma == gamma && c.beta == beta && c.seed == seed)
            .and_then(|c| c.outcome.as_ref().ok().map(|(_, m)| m))
    }

    pub const CSV_HEADER: &'static str =
        "gamma,beta,seed,status,proxy_reward,true_reward,kl,e1,e2,composite,rewarded_share,hacking_step";

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {SWEEP_SCHEMA}\n{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            match &c.outcome {
                Ok((_, m)) => {
                    let hack = match m.hacking_step {
                        Some(Some(s)) => s.to_string(),
                        Some(None) => "none".into(),
                        None => "n/a".into(),
                    };
                    out += &format!(
                        "{},{},{},ok,{},{},{},{},{},{},{},{}\n",
                        c.gamma,
                        c.beta,
                        c.seed,
                        m.proxy_reward,
                        m.true_reward,
                        m.kl,
                        m.e1,
                        m.e2,
                        m.composite,
                        m.rewarded_share,
                        hack
                    );
                }
                Err(e) => {
                    let msg = e.replace([',', '\n'], ";");
                    out += &format!("{},{},{},failed: {msg},,,,,,,,\n", c.gamma, c.beta, c.seed);
                }
            }
        }
        out
    }
}

/// Runs `base` for every `(gamma, beta, seed)` combination in parallel.
/// A failing cell is recorded and does not stop the others.
pub fn sweep(
    base: &RunConfig,
    sched: &DiffusionSchedule,
    reference: &Denoiser,
    gammas: &[f64],
    betas: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    base.validate()?;
    let mut grid = Vec::new();
    for &gamma in gammas {
        for &beta in betas {
            for &seed in seeds {
                grid.push((gamma, beta, seed));
            }
        }
    }
    let cells = grid
        .into_par_iter()
        .map(|(gamma, beta, seed)| {
            let mut config = base.clone();
            config.loss = base.loss.with_gamma(gamma).with_beta(beta);
            config.seed = seed;
            let outcome = run_cell(config, sched, reference).map_err(|e| e.to_string());
            SweepCell {
                gamma,
                beta,
                seed,
                outcome,
            }
        })
        .collect();
    Ok(SweepResult { cells })
}

fn run_cell(config: RunConfig, sched: &DiffusionSchedule, reference: &Denoiser) -> Result<(RunLog, FinalMetrics)> {
    let mut trainer = Trainer::new(config, sched.clone(), reference.clone())?;
    trainer.run(None, None)?;
    let log = trainer.into_state().log;
    let metrics = FinalMetrics::from_log(&log).expect("a started run always has row 0");
    Ok((log, metrics))
}
