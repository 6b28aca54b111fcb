//! Discrete-time variance-preserving diffusion.
//!
//! The forward process is `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)` with
//! `alpha_t^2 + sigma_t^2 = 1`. The reverse kernel is Gaussian with a mean
//! computed from the network's noise prediction and the fixed posterior
//! variance `sigma_{t|t-1}^2 sigma_{t-1}^2 / sigma_t^2`.

mod pretrain;
mod schedule;
mod trajectory;

pub use pretrain::{
    dm_loss_value, dm_loss_with_draws, dm_pretrain_loss, pretrain, NoiseSample, PretrainConfig, PretrainReport,
};
pub use schedule::{DiffusionSchedule, ScheduleKind};
pub use trajectory::{
    gaussian_logprob, reverse_step, reverse_step_with_noise, sample_many, sample_trajectory, step_density,
    step_logprob, step_logprob_grad, StepDensity, StepRecord, Trajectory, TrajectoryPair, TRAJECTORY_SCHEMA,
};

use crate::{Error, Result};

/// `alpha_t x0 + sigma_t eps`.
pub fn forward_noise(sched: &DiffusionSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    sched.check_t(t, 0)?;
    if x0.len() != eps.len() {
        return Err(Error::contract(format!(
            "x0 has dim {} but eps has dim {}",
            x0.len(),
            eps.len()
        )));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Bound on each coordinate of the denoised estimate `x0_hat` implied by a
/// noise prediction. Far outside the data range the network extrapolates,
/// and an unclipped estimate can feed back into ever larger states.
pub const X0_CLIP: f64 = 10.0;

/// Mean of the reverse kernel given a noise prediction:
/// `(x_t - sigma_{t|t-1}^2 / sigma_t * eps_hat) / alpha_{t|t-1}`, with the
/// implied `x0_hat` clipped to `[-X0_CLIP, X0_CLIP]`.
pub fn posterior_mean(sched: &DiffusionSchedule, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Vec<f64> {
    posterior_mean_with_grad(sched, x_t, t, eps_hat).0
}

/// [`posterior_mean`] together with the per-coordinate derivative
/// `d mean_i / d eps_hat_i` (zero where the clip is active).
pub fn posterior_mean_with_grad(
    sched: &DiffusionSchedule,
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let a = sched.alpha_given_prev(t);
    let k = sched.var_given_prev(t) / sched.sigma(t);
    let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
    let s_prev = sched.sigma(t - 1);
    let c0 = sched.alpha(t - 1) * sched.var_given_prev(t) / (sigma * sigma);
    let ct = a * s_prev * s_prev / (sigma * sigma);
    let slope = mean_noise_coefficient(sched, t);
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = (x - sigma * e) / alpha;
            if x0.abs() <= X0_CLIP {
                ((x - k * e) / a, slope)
            } else {
                (c0 * X0_CLIP.copysign(x0) + ct * x, 0.0)
            }
        })
        .unzip()
}

/// `d mean / d eps_hat` away from the clip, a scalar multiple of the identity.
pub fn mean_noise_coefficient(sched: &DiffusionSchedule, t: usize) -> f64 {
    -sched.var_given_prev(t) / (sched.sigma(t) * sched.alpha_given_prev(t))
}
