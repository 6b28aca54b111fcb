//! Monte-Carlo divergence of the fine-tuned chain from the reference chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{posterior_mean, sample_trajectory, DiffusionSchedule};
use crate::numerics::{squared_distance, NoisePredictor, RngState};
use crate::{Error, Result};

/// KL between two Gaussians sharing the isotropic variance `var`.
pub fn gaussian_kl_equal_var(mean_p: &[f64], mean_q: &[f64], var: f64) -> f64 {
    squared_distance(mean_p, mean_q) / (2.0 * var)
}

/// `KL(N(mean_p, var_p I) || N(mean_q, var_q I))`.
pub fn gaussian_kl(mean_p: &[f64], var_p: f64, mean_q: &[f64], var_q: f64) -> f64 {
    let ratio = var_p / var_q;
    0.5 * mean_p.len() as f64 * (ratio - 1.0 - ratio.ln()) + squared_distance(mean_p, mean_q) / (2.0 * var_q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Averages `sum_t KL(p_theta(.|x_t) || p_ref(.|x_t))` over `n` chains drawn
/// from the policy, cycling through `conditions`. Chain `i` uses stream
/// `rng.split(i)`.
pub fn kl_to_reference<P, R>(
    model: &P,
    reference: &R,
    sched: &DiffusionSchedule,
    conditions: &[Vec<f64>],
    rng: &RngState,
    n: usize,
) -> Result<KlEstimate>
where
    P: NoisePredictor + Sync + ?Sized,
    R: NoisePredictor + Sync + ?Sized,
{
    if n == 0 || conditions.is_empty() {
        return Err(Error::contract("KL estimate needs n >= 1 and at least one condition"));
    }
    let per_chain: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = &conditions[i % conditions.len()];
            let traj = sample_trajectory(sched, model, c, &mut rng.split(i as u64))?;
            let mut kl = 0.0;
            for t in 1..=sched.total_steps() {
                let x_t = traj.state(t);
                let step = traj.step(t);
                let (eps_q, log_var_q) = reference.predict_step(x_t, t, c)?;
                let mu_q = posterior_mean(sched, x_t, t, &eps_q);
                let var_q = sched.step_variance(t, log_var_q).0;
                kl += gaussian_kl(&step.mean, step.variance, &mu_q, var_q);
            }
            Ok(kl)
        })
        .collect::<Result<_>>()?;
    let mean = per_chain.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = per_chain.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(KlEstimate {
        mean,
        std_error,
        samples: n,
    })
}
