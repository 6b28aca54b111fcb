use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{log_sum_exp, RngState};
use crate::objectives::see_bandit_loss;
use crate::{Error, Result};

/// A tabular softmax policy trained online from reward-labelled action
/// pairs: every step draws `batch` pairs from the current policy, labels
/// each by the larger reward, and takes one clipped gradient step on the
/// step loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditToyConfig {
    /// Reference probabilities (normalized on use).
    pub p_ref: Vec<f64>,
    /// Per-action rewards; the unique maximum is the tracked action.
    pub rewards: Vec<f64>,
    pub beta: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BanditToyConfig {
    fn default() -> Self {
        let p_ref = vec![0.30, 0.25, 0.18, 0.12, 0.08, 0.04, 0.02, 0.01];
        let rewards = (0..p_ref.len()).map(|a| a as f64 / 7.0).collect();
        Self {
            p_ref,
            rewards,
            beta: 0.1,
            lr: 1.0,
            clip_norm: 1.0,
            batch: 16,
            steps: 2000,
            seed: 0,
        }
    }
}

impl BanditToyConfig {
    /// Index of the unique highest-reward action.
    pub fn high_action(&self) -> Result<usize> {
        if self.rewards.len() != self.p_ref.len() || self.rewards.len() < 2 {
            return Err(Error::config(
                "bandit toy needs matching p_ref and rewards with at least two actions",
            ));
        }
        let best = self.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..self.rewards.len()).filter(|&a| self.rewards[a] == best).collect();
        match winners.as_slice() {
            [a] => Ok(*a),
            _ => Err(Error::config(format!(
                "bandit toy needs exactly one highest-reward action, found {}",
                winners.len()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.high_action()?;
        if self.p_ref.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::config("reference probabilities must be positive"));
        }
        if !(self.beta > 0.0) || !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.batch == 0 {
            return Err(Error::config("beta, lr, clip_norm and batch must be positive"));
        }
        Ok(())
    }
}

/// The grid of `gamma` values the toy is reported on.
pub const BANDIT_GAMMAS: [f64; 5] = [0.0, 1.0, 3.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditCurve {
    pub gamma: f64,
    /// Probability of the high-reward action before each step; `steps + 1`
    /// entries.
    pub high_mass: Vec<f64>,
    pub final_probs: Vec<f64>,
}

/// First step at which the tracked mass reaches `threshold`.
pub fn time_to_mass(curve: &BanditCurve, threshold: f64) -> Option<usize> {
    curve.high_mass.iter().position(|&m| m >= threshold)
}

/// One curve per `gamma`. All curves see the same uniforms, so they differ
/// only through `gamma`.
pub fn run_bandit_toy(config: &BanditToyConfig, gammas: &[f64]) -> Result<Vec<BanditCurve>> {
    config.validate()?;
    let high = config.high_action()?;
    let total: f64 = config.p_ref.iter().sum();
    let log_ref: Vec<f64> = config.p_ref.iter().map(|p| (p / total).ln()).collect();
    gammas
        .par_iter()
        .map(|&gamma| {
            let mut logits = log_ref.clone();
            let mut rng = RngState::new(config.seed);
            let mut probs: Vec<f64> = config.p_ref.iter().map(|p| p / total).collect();
            let mut high_mass = Vec::with_capacity(config.steps + 1);
            for _ in 0..config.steps {
                high_mass.push(probs[high]);
                let mut pairs = Vec::with_capacity(config.batch);
                for _ in 0..config.batch {
                    let a = inverse_cdf(&probs, rng.uniform());
                    let b = inverse_cdf(&probs, rng.uniform());
                    if a != b {
                        let a_wins = config.rewards[a] > config.rewards[b];
                        pairs.push(if a_wins { (a, b) } else { (b, a) });
                    }
                }
                if pairs.is_empty() {
                    continue;
                }
                let (_, mut grad) = see_bandit_loss(&logits, &log_ref, &pairs, config.beta, gamma)?;
                // average over the drawn batch, skipped ties included
                let share = pairs.len() as f64 / config.batch as f64;
                grad.iter_mut().for_each(|g| *g *= share);
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                let clip = if norm > config.clip_norm {
                    config.clip_norm / norm
                } else {
                    1.0
                };
                for (l, g) in logits.iter_mut().zip(&grad) {
                    *l -= config.lr * clip * g;
                }
                if logits.iter().any(|l| !l.is_finite()) {
                    return Err(Error::numerical(format!("bandit logits diverged at gamma {gamma}")));
                }
                probs = softmax(&logits);
            }
            high_mass.push(probs[high]);
            Ok(BanditCurve {
                gamma,
                high_mass,
                final_probs: probs,
            })
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}
