use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear `beta(s)` from 0.1 to 20 in continuous time, integrated exactly:
    /// `abar(s) = exp(-(0.1 s + 9.95 s^2))` with `s = t / T`.
    Linear,
    /// Squared-cosine cumulative signal with offset 0.008, per-step beta
    /// clipped at 0.999.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!(
                "unknown schedule kind `{other}` (expected linear or cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Per-timestep coefficients for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    /// `log alpha_t^2`, kept so that ratios and `1 - ratio` stay accurate.
    log_abar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    snr: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(total_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::config(format!(
                "a schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        let n = total_steps as f64;
        let log_abar: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..=total_steps)
                .map(|t| {
                    let s = t as f64 / n;
                    -(0.1 * s + 9.95 * s * s)
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let s = t as f64 / n;
                    ((s + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let mut out = vec![0.0];
                for t in 1..=total_steps {
                    let beta = (1.0 - f(t) / f(t - 1)).min(0.999);
                    out.push(out[t - 1] + (-beta).ln_1p());
                }
                out
            }
        };
        let alpha: Vec<f64> = log_abar.iter().map(|l| (0.5 * l).exp()).collect();
        let sigma: Vec<f64> = log_abar.iter().map(|l| (-l.exp_m1()).sqrt()).collect();
        let snr = alpha.iter().zip(&sigma).map(|(a, s)| (a * a) / (s * s)).collect();
        Ok(Self {
            kind,
            log_abar,
            alpha,
            sigma,
            snr,
        })
    }

    pub fn make(total_steps: usize, kind: &str) -> Result<Self> {
        Self::new(total_steps, kind.parse()?)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `alpha_t^2 / sigma_t^2`; infinite at `t = 0`.
    pub fn snr(&self) -> &[f64] {
        &self.snr
    }

    /// `alpha_{t|t-1} = alpha_t / alpha_{t-1}`.
    pub fn alpha_given_prev(&self, t: usize) -> f64 {
        (0.5 * (self.log_abar[t] - self.log_abar[t - 1])).exp()
    }

    /// `sigma_{t|t-1}^2 = sigma_t^2 - alpha_{t|t-1}^2 sigma_{t-1}^2`.
    pub fn var_given_prev(&self, t: usize) -> f64 {
        -(self.log_abar[t] - self.log_abar[t - 1]).exp_m1()
    }

    /// Variance of the reverse kernel at step `t` (from `x_t` to `x_{t-1}`).
    ///
    /// The exact posterior variance vanishes at `t = 1`; that step reuses the
    /// value of `t = 2` so every transition has a proper density.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        let t = t.max(2);
        let s_prev = self.sigma[t - 1];
        let s_t = self.sigma[t];
        self.var_given_prev(t) * (s_prev * s_prev) / (s_t * s_t)
    }

    /// Largest log multiplier a learned variance may apply at step `t`: the
    /// reverse step may never add more variance than `sigma_{t-1}^2`, the
    /// noise level it lands on. The final step therefore stays fixed.
    pub fn log_variance_cap(&self, t: usize) -> f64 {
        let s = self.sigma[t - 1];
        if s == 0.0 {
            return 0.0;
        }
        (s * s / self.reverse_variance(t)).ln().max(0.0)
    }

    /// Reverse-kernel variance under a log multiplier `log_var`, capped by
    /// [`DiffusionSchedule::log_variance_cap`]. The flag reports whether
    /// the cap was active.
    pub fn step_variance(&self, t: usize, log_var: f64) -> (f64, bool) {
        let cap = self.log_variance_cap(t);
        let capped = log_var > cap;
        (self.reverse_variance(t) * log_var.min(cap).exp(), capped)
    }

    pub(crate) fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.total_steps() {
            Err(Error::contract(format!(
                "timestep {t} outside {min}..={}",
                self.total_steps()
            )))
        } else {
            Ok(())
        }
    }
}
