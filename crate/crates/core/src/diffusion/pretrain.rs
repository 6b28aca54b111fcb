//! The epsilon-matching objective and a plain pretraining loop.

use serde::{Deserialize, Serialize};

use super::{forward_noise, DiffusionSchedule};
use crate::data::{DataPoint, Dataset};
use crate::error::ensure_finite;
use crate::numerics::{Adam, AdamConfig, Denoiser, Gradients, NoisePredictor, RngState};
use crate::{Error, Result};

/// The `(t, eps)` pair drawn for one batch item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl NoiseSample {
    /// `t` uniform on `1..=T`, `eps` standard normal.
    pub fn draw(sched: &DiffusionSchedule, dim: usize, rng: &mut RngState) -> Self {
        let t = 1 + rng.below(sched.total_steps());
        Self {
            t,
            eps: rng.gaussian(dim),
        }
    }
}

fn check_batch(batch: &[DataPoint], draws: &[NoiseSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::contract(format!(
            "{} batch items but {} noise draws",
            batch.len(),
            draws.len()
        )));
    }
    Ok(())
}

/// Mean over the batch of `||eps - eps_hat(x_t, t, c)||^2` (summed over
/// coordinates, unit weighting).
pub fn dm_loss_value<M: NoisePredictor + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    batch: &[DataPoint],
    draws: &[NoiseSample],
) -> Result<f64> {
    check_batch(batch, draws)?;
    let mut total = 0.0;
    for (item, draw) in batch.iter().zip(draws) {
        let x_t = forward_noise(sched, &item.x, draw.t, &draw.eps)?;
        let pred = model.predict_noise(&x_t, draw.t, &item.c)?;
        total += crate::numerics::squared_distance(&draw.eps, &pred);
    }
    ensure_finite(total / batch.len() as f64, "diffusion loss")
}

/// Loss and parameter gradient for fixed draws.
pub fn dm_loss_with_draws(
    sched: &DiffusionSchedule,
    model: &Denoiser,
    batch: &[DataPoint],
    draws: &[NoiseSample],
) -> Result<(f64, Gradients)> {
    check_batch(batch, draws)?;
    let n = batch.len() as f64;
    let mut grad = model.zero_grad();
    let mut total = 0.0;
    for (item, draw) in batch.iter().zip(draws) {
        let x_t = forward_noise(sched, &item.x, draw.t, &draw.eps)?;
        let cache = model.forward_cached(&x_t, draw.t, &item.c)?;
        let residual: Vec<f64> = model.eps_of(&cache).iter().zip(&draw.eps).map(|(p, e)| p - e).collect();
        total += residual.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
        model.accumulate(&cache, &upstream, &mut grad);
    }
    Ok((ensure_finite(total / n, "diffusion loss")?, grad))
}

/// Draws `(t, eps)` per item from `rng`, then evaluates the loss and gradient.
pub fn dm_pretrain_loss(
    sched: &DiffusionSchedule,
    model: &Denoiser,
    batch: &[DataPoint],
    rng: &mut RngState,
) -> Result<(f64, Gradients)> {
    let draws: Vec<NoiseSample> = batch.iter().map(|p| NoiseSample::draw(sched, p.x.len(), rng)).collect();
    dm_loss_with_draws(sched, model, batch, &draws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            lr: 2e-3,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Adam on fresh dataset batches. The learning rate decays linearly to a
/// tenth of its starting value over the run.
pub fn pretrain(
    sched: &DiffusionSchedule,
    model: &mut Denoiser,
    dataset: &dyn Dataset,
    config: &PretrainConfig,
    rng: &mut RngState,
) -> Result<PretrainReport> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::config("pretrain steps and batch_size must be positive"));
    }
    let mut adam = Adam::new(
        AdamConfig {
            clip_norm: Some(config.clip_norm),
            ..AdamConfig::with_lr(config.lr)
        },
        model.num_params(),
    );
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<DataPoint> = (0..config.batch_size).map(|_| dataset.sample(rng)).collect();
        let (loss, grad) = dm_pretrain_loss(sched, model, &batch, rng)?;
        adam.config.lr = config.lr * (1.0 - 0.9 * step as f64 / config.steps as f64);
        adam.step(model.params_mut(), &grad)?;
        losses.push(loss);
    }
    let window = (config.steps / 10).clamp(1, 100);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(PretrainReport {
        initial_loss: mean(&losses[..window]),
        final_loss: mean(&losses[losses.len() - window..]),
        losses,
    })
}
