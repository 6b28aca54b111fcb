//! Per-step log-ratio objectives on denoising chains.

use serde::{Deserialize, Serialize};

use crate::diffusion::{step_density, step_logprob, DiffusionSchedule, TrajectoryPair};
use crate::error::ensure_finite;
use crate::numerics::{neg_log_sigmoid, sigmoid, Denoiser, Gradients, NoisePredictor};
use crate::{Error, Result};

/// Winner and loser step log-densities under the policy and the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLogProbs {
    pub policy_w: f64,
    pub policy_l: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

/// `beta (1+gamma) [(policy_w - ref_w/(1+gamma)) - (policy_l - ref_l/(1+gamma))]`.
pub fn step_margin(lp: &StepLogProbs, beta: f64, gamma: f64) -> f64 {
    let k = 1.0 + gamma;
    beta * k * ((lp.policy_w - lp.ref_w / k) - (lp.policy_l - lp.ref_l / k))
}

pub fn step_loss_from_logprobs(lp: &StepLogProbs, beta: f64, gamma: f64) -> f64 {
    neg_log_sigmoid(step_margin(lp, beta, gamma))
}

/// One winner transition and one loser transition at the same timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPair {
    pub c: Vec<f64>,
    pub t: usize,
    pub w_from: Vec<f64>,
    pub w_to: Vec<f64>,
    pub l_from: Vec<f64>,
    pub l_to: Vec<f64>,
}

impl StepPair {
    /// Step `t` of a chain pair.
    pub fn from_chains(pair: &TrajectoryPair, t: usize) -> Result<Self> {
        if t == 0 || t > pair.total_steps() {
            return Err(Error::contract(format!("step {t} outside 1..={}", pair.total_steps())));
        }
        Ok(Self {
            c: pair.condition().to_vec(),
            t,
            w_from: pair.winner.states[t].clone(),
            w_to: pair.winner.states[t - 1].clone(),
            l_from: pair.loser.states[t].clone(),
            l_to: pair.loser.states[t - 1].clone(),
        })
    }

    /// Two continuations `x_w`, `x_l` of one state `x_t`.
    pub fn shared_state(c: &[f64], t: usize, x_t: &[f64], x_w: &[f64], x_l: &[f64]) -> Self {
        Self {
            c: c.to_vec(),
            t,
            w_from: x_t.to_vec(),
            w_to: x_w.to_vec(),
            l_from: x_t.to_vec(),
            l_to: x_l.to_vec(),
        }
    }

    pub fn reference_logprobs<M: NoisePredictor + ?Sized>(
        &self,
        sched: &DiffusionSchedule,
        reference: &M,
    ) -> Result<(f64, f64)> {
        Ok((
            step_logprob(sched, reference, &self.w_from, &self.w_to, self.t, &self.c)?,
            step_logprob(sched, reference, &self.l_from, &self.l_to, self.t, &self.c)?,
        ))
    }
}

/// Reference step log-densities of a chain pair, computed once. Index
/// `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCache {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
}

impl ReferenceCache {
    pub fn compute<M: NoisePredictor + ?Sized>(
        pair: &TrajectoryPair,
        sched: &DiffusionSchedule,
        reference: &M,
    ) -> Result<Self> {
        Ok(Self {
            winner: pair.winner.logprobs(sched, reference)?,
            loser: pair.loser.logprobs(sched, reference)?,
        })
    }
}

/// Loss and gradient of one step pair given its reference log-densities.
#[allow(clippy::too_many_arguments)]
fn step_pair_loss(
    sched: &DiffusionSchedule,
    model: &Denoiser,
    sp: &StepPair,
    ref_w: f64,
    ref_l: f64,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let dw = step_density(sched, model, &sp.w_from, &sp.w_to, sp.t, &sp.c)?;
    let dl = step_density(sched, model, &sp.l_from, &sp.l_to, sp.t, &sp.c)?;
    let lp = StepLogProbs {
        policy_w: dw.logprob,
        policy_l: dl.logprob,
        ref_w,
        ref_l,
    };
    let z = step_margin(&lp, beta, gamma);
    let loss = ensure_finite(neg_log_sigmoid(z), "step loss")?;
    // d loss / d policy_w = -sigma(-z) beta (1+gamma); the loser term is its negative
    let g = -sigmoid(-z) * beta * (1.0 + gamma);
    let mut grad = model.zero_grad();
    dw.backward(model, g, &mut grad);
    dl.backward(model, -g, &mut grad);
    Ok((loss, grad))
}

/// Step loss at step `k` of a chain pair, self-entropy weight `gamma`
/// (`gamma = 0` is the plain step-wise DPO objective).
#[allow(clippy::too_many_arguments)]
pub fn d3po_step_loss(
    pair: &TrajectoryPair,
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    k: usize,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let sp = StepPair::from_chains(pair, k)?;
    let (rw, rl) = sp.reference_logprobs(sched, reference)?;
    step_pair_loss(sched, model, &sp, rw, rl, beta, gamma)
}

/// [`d3po_step_loss`] reading the reference terms from a cache.
#[allow(clippy::too_many_arguments)]
pub fn d3po_step_loss_cached(
    pair: &TrajectoryPair,
    cache: &ReferenceCache,
    sched: &DiffusionSchedule,
    model: &Denoiser,
    k: usize,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let sp = StepPair::from_chains(pair, k)?;
    step_pair_loss(sched, model, &sp, cache.winner[k - 1], cache.loser[k - 1], beta, gamma)
}

/// Step loss for two continuations of a shared state.
pub fn shared_state_step_loss(
    sp: &StepPair,
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let (rw, rl) = sp.reference_logprobs(sched, reference)?;
    step_pair_loss(sched, model, sp, rw, rl, beta, gamma)
}

/// Single-step surrogate of the chain objective: the step-`t` log-ratio
/// margin scaled by `beta T`.
pub fn stepwise_bound_loss(
    pair: &TrajectoryPair,
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    t: usize,
    beta: f64,
) -> Result<(f64, Gradients)> {
    let total = pair.total_steps() as f64;
    d3po_step_loss(pair, sched, model, reference, t, beta * total, 0.0)
}

/// `Delta_t = (log pi(w_t) - log ref(w_t)) - (log pi(l_t) - log ref(l_t))`
/// for `t = 1..=T` (index `t - 1`).
pub fn chain_log_ratios<P, R>(
    pair: &TrajectoryPair,
    sched: &DiffusionSchedule,
    model: &P,
    reference: &R,
) -> Result<Vec<f64>>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let pw = pair.winner.logprobs(sched, model)?;
    let pl = pair.loser.logprobs(sched, model)?;
    let rw = pair.winner.logprobs(sched, reference)?;
    let rl = pair.loser.logprobs(sched, reference)?;
    Ok((0..pw.len()).map(|i| (pw[i] - rw[i]) - (pl[i] - rl[i])).collect())
}

/// `-log sigma(beta sum_t Delta_t)`: the objective on whole chains, with
/// its gradient.
pub fn full_chain_loss(
    pair: &TrajectoryPair,
    sched: &DiffusionSchedule,
    model: &Denoiser,
    reference: &Denoiser,
    beta: f64,
) -> Result<(f64, Gradients)> {
    let total = pair.total_steps();
    let mut densities = Vec::with_capacity(2 * total);
    let mut margin = 0.0;
    let rw = pair.winner.logprobs(sched, reference)?;
    let rl = pair.loser.logprobs(sched, reference)?;
    for t in 1..=total {
        let sp = StepPair::from_chains(pair, t)?;
        let dw = step_density(sched, model, &sp.w_from, &sp.w_to, t, &sp.c)?;
        let dl = step_density(sched, model, &sp.l_from, &sp.l_to, t, &sp.c)?;
        margin += (dw.logprob - rw[t - 1]) - (dl.logprob - rl[t - 1]);
        densities.push((dw, dl));
    }
    let z = beta * margin;
    let loss = ensure_finite(neg_log_sigmoid(z), "chain loss")?;
    let g = -sigmoid(-z) * beta;
    let mut grad = model.zero_grad();
    for (dw, dl) in &densities {
        dw.backward(model, g, &mut grad);
        dl.backward(model, -g, &mut grad);
    }
    Ok((loss, grad))
}
