//! Noise-prediction objectives: the chain log-ratio replaced by differences
//! of denoising errors at one sampled timestep.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::error::ensure_finite;
use crate::numerics::{neg_log_sigmoid, order_free_mean, sigmoid, squared_distance, Denoiser, Gradients, RngState};
use crate::preference::PreferencePair;
use crate::{Error, Result};

/// Timestep and noise shared by the winner and loser of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Weights on the policy and reference error brackets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseForm {
    pub policy_scale: f64,
    pub ref_scale: f64,
}

impl NoiseForm {
    pub const BASE: NoiseForm = NoiseForm {
        policy_scale: 1.0,
        ref_scale: 1.0,
    };

    /// Policy bracket scaled by `1 + gamma`.
    pub fn see_a(gamma: f64) -> Self {
        Self {
            policy_scale: 1.0 + gamma,
            ref_scale: 1.0,
        }
    }

    /// Reference bracket scaled by `1 / (1 + gamma)`.
    pub fn see_b(gamma: f64) -> Self {
        Self {
            policy_scale: 1.0,
            ref_scale: 1.0 / (1.0 + gamma),
        }
    }
}

/// One `(t, eps)` per pair: `t` uniform on `1..=T`, `eps` standard normal.
pub fn draw_noise(batch: &[PreferencePair], sched: &DiffusionSchedule, rng: &mut RngState) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|p| NoiseDraw {
            t: 1 + rng.below(sched.total_steps()),
            eps: rng.gaussian(p.x_w.len()),
        })
        .collect()
}

/// Mean over pairs of `-log sigma(-beta T [a (e_w - e_l) - b (e_ref_w - e_ref_l)])`
/// where `e` is the squared noise-prediction error at the drawn `(t, eps)`
/// and `(a, b)` come from `form`.
#[allow(clippy::too_many_arguments)]
pub fn noise_loss_with_draws(
    form: NoiseForm,
    batch: &[PreferencePair],
    draws: &[NoiseDraw],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::contract("empty preference batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::contract("one noise draw per pair is required"));
    }
    let n = batch.len() as f64;
    let beta_t = beta * sched.total_steps() as f64;
    let mut grad = model.zero_grad();
    let mut losses = Vec::with_capacity(batch.len());
    for (pair, draw) in batch.iter().zip(draws) {
        if pair.x_w.len() != pair.x_l.len() {
            return Err(Error::contract("winner and loser dimensions differ"));
        }
        let xw = forward_noise(sched, &pair.x_w, draw.t, &draw.eps)?;
        let xl = forward_noise(sched, &pair.x_l, draw.t, &draw.eps)?;
        let cw = model.forward_cached(&xw, draw.t, &pair.c)?;
        let cl = model.forward_cached(&xl, draw.t, &pair.c)?;
        let e_w = squared_distance(&draw.eps, model.eps_of(&cw));
        let e_l = squared_distance(&draw.eps, model.eps_of(&cl));
        let r_w = squared_distance(&draw.eps, &reference.forward(&xw, draw.t, &pair.c)?);
        let r_l = squared_distance(&draw.eps, &reference.forward(&xl, draw.t, &pair.c)?);
        let z = -beta_t * (form.policy_scale * (e_w - e_l) - form.ref_scale * (r_w - r_l));
        losses.push(neg_log_sigmoid(z));
        // d loss / d e_w = sigma(-z) beta T a, and d e_w / d eps_hat = 2 (eps_hat - eps)
        let g = sigmoid(-z) * beta_t * form.policy_scale / n;
        let up_w: Vec<f64> = model
            .eps_of(&cw)
            .iter()
            .zip(&draw.eps)
            .map(|(p, e)| 2.0 * g * (p - e))
            .collect();
        let up_l: Vec<f64> = model
            .eps_of(&cl)
            .iter()
            .zip(&draw.eps)
            .map(|(p, e)| -2.0 * g * (p - e))
            .collect();
        model.accumulate(&cw, &up_w, &mut grad);
        model.accumulate(&cl, &up_l, &mut grad);
    }
    Ok((ensure_finite(order_free_mean(&losses), "noise loss")?, grad))
}

pub fn diffusion_dpo_noise_loss(
    batch: &[PreferencePair],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    rng: &mut RngState,
) -> Result<(f64, Gradients)> {
    let draws = draw_noise(batch, sched, rng);
    noise_loss_with_draws(NoiseForm::BASE, batch, &draws, sched, model, reference, beta)
}

#[allow(clippy::too_many_arguments)]
pub fn see_noise_loss_a_with_draws(
    batch: &[PreferencePair],
    draws: &[NoiseDraw],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    noise_loss_with_draws(NoiseForm::see_a(gamma), batch, draws, sched, model, reference, beta)
}

#[allow(clippy::too_many_arguments)]
pub fn see_noise_loss_b_with_draws(
    batch: &[PreferencePair],
    draws: &[NoiseDraw],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    noise_loss_with_draws(NoiseForm::see_b(gamma), batch, draws, sched, model, reference, beta)
}

pub fn see_noise_loss_a(
    batch: &[PreferencePair],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    gamma: f64,
    rng: &mut RngState,
) -> Result<(f64, Gradients)> {
    let draws = draw_noise(batch, sched, rng);
    see_noise_loss_a_with_draws(batch, &draws, sched, model, reference, beta, gamma)
}

pub fn see_noise_loss_b(
    batch: &[PreferencePair],
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    gamma: f64,
    rng: &mut RngState,
) -> Result<(f64, Gradients)> {
    let draws = draw_noise(batch, sched, rng);
    see_noise_loss_b_with_draws(batch, &draws, sched, model, reference, beta, gamma)
}
