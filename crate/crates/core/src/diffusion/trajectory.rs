//! Reverse-chain sampling, step densities and recorded trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{posterior_mean, posterior_mean_with_grad, DiffusionSchedule};
use crate::error::ensure_finite;
use crate::numerics::{Denoiser, ForwardCache, Gradients, NoisePredictor, RngState};
use crate::{Error, Result};

pub const TRAJECTORY_SCHEMA: &str = "prefdiff.trajectory/1";

/// What happened at one reverse transition `x_t -> x_{t-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub mean: Vec<f64>,
    pub variance: f64,
    pub noise: Vec<f64>,
}

impl StepRecord {
    /// `mean + sqrt(variance) * noise`.
    pub fn replay(&self) -> Vec<f64> {
        let sd = self.variance.sqrt();
        self.mean.iter().zip(&self.noise).map(|(m, z)| m + sd * z).collect()
    }
}

/// A full reverse chain. `states[t]` is `x_t`, so `states[T]` is the initial
/// noise and `states[0]` the generated sample; `steps[t - 1]` records the
/// transition out of `x_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    schema: String,
    #[serde(flatten)]
    trajectory: Trajectory,
}

impl Trajectory {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn sample(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t]
    }

    pub fn step(&self, t: usize) -> &StepRecord {
        &self.steps[t - 1]
    }

    /// Checks that every recorded step reproduces the next state bit-for-bit.
    pub fn replays_exactly(&self) -> bool {
        self.states.len() == self.steps.len() + 1
            && self
                .steps
                .iter()
                .all(|s| s.t >= 1 && s.replay() == self.states[s.t - 1])
    }

    /// Step log-densities `log p(x_{t-1} | x_t)` for `t = 1..=T` under `model`.
    pub fn logprobs<M: NoisePredictor + ?Sized>(&self, sched: &DiffusionSchedule, model: &M) -> Result<Vec<f64>> {
        (1..=self.total_steps())
            .map(|t| step_logprob(sched, model, &self.states[t], &self.states[t - 1], t, &self.condition))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TrajectoryRecord {
            schema: TRAJECTORY_SCHEMA.to_string(),
            trajectory: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: TrajectoryRecord = serde_json::from_str(text)?;
        if record.schema != TRAJECTORY_SCHEMA {
            return Err(Error::config(format!(
                "trajectory schema `{}` is not {TRAJECTORY_SCHEMA}",
                record.schema
            )));
        }
        Ok(record.trajectory)
    }
}

/// Winner and loser chains for the same condition and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub winner: Trajectory,
    pub loser: Trajectory,
}

impl TrajectoryPair {
    pub fn new(winner: Trajectory, loser: Trajectory) -> Result<Self> {
        if winner.condition != loser.condition {
            return Err(Error::contract("winner and loser conditions differ"));
        }
        if winner.total_steps() != loser.total_steps() {
            return Err(Error::contract(format!(
                "winner has {} steps, loser {}",
                winner.total_steps(),
                loser.total_steps()
            )));
        }
        Ok(Self { winner, loser })
    }

    pub fn condition(&self) -> &[f64] {
        &self.winner.condition
    }

    pub fn total_steps(&self) -> usize {
        self.winner.total_steps()
    }
}

/// `log N(x; mean, var I)`.
pub fn gaussian_logprob(x: &[f64], mean: &[f64], var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::contract(format!("variance must be positive, got {var}")));
    }
    if x.len() != mean.len() {
        return Err(Error::contract("x and mean dimensions differ"));
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * var) - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln())
}

/// One reverse transition with the caller's standard-normal `noise`.
pub fn reverse_step_with_noise<M: NoisePredictor + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    x_t: &[f64],
    t: usize,
    c: &[f64],
    noise: Vec<f64>,
) -> Result<(Vec<f64>, StepRecord)> {
    sched.check_t(t, 1)?;
    let (eps, log_var) = model.predict_step(x_t, t, c)?;
    let mean = posterior_mean(sched, x_t, t, &eps);
    if let Some(bad) = mean.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("reverse mean at t={t} is not finite ({bad})")));
    }
    let variance = ensure_finite(sched.step_variance(t, log_var).0, &format!("reverse variance at t={t}"))?;
    let record = StepRecord {
        t,
        mean,
        variance,
        noise,
    };
    Ok((record.replay(), record))
}

pub fn reverse_step<M: NoisePredictor + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    x_t: &[f64],
    t: usize,
    c: &[f64],
    rng: &mut RngState,
) -> Result<(Vec<f64>, StepRecord)> {
    let noise = rng.gaussian(x_t.len());
    reverse_step_with_noise(sched, model, x_t, t, c, noise)
}

/// Draws `x_T ~ N(0, I)` and runs all `T` reverse steps.
pub fn sample_trajectory<M: NoisePredictor + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    c: &[f64],
    rng: &mut RngState,
) -> Result<Trajectory> {
    let total = sched.total_steps();
    let mut states = vec![Vec::new(); total + 1];
    let mut steps = Vec::with_capacity(total);
    states[total] = rng.gaussian(model.data_dim());
    for t in (1..=total).rev() {
        let (next, record) = reverse_step(sched, model, &states[t], t, c, rng)?;
        states[t - 1] = next;
        steps.push(record);
    }
    steps.reverse();
    Ok(Trajectory {
        condition: c.to_vec(),
        states,
        steps,
    })
}

/// `n` trajectories per condition, each on its own split stream, so the
/// result does not depend on the thread count.
pub fn sample_many<M: NoisePredictor + Sync + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    conditions: &[Vec<f64>],
    n: usize,
    rng: &RngState,
) -> Result<Vec<Trajectory>> {
    let jobs: Vec<(usize, &Vec<f64>)> = conditions
        .iter()
        .flat_map(|c| std::iter::repeat_n(c, n))
        .enumerate()
        .collect();
    jobs.into_par_iter()
        .map(|(i, c)| sample_trajectory(sched, model, c, &mut rng.split(i as u64)))
        .collect()
}

/// `log p(x_prev | x_t)` for the reverse kernel of `model` at step `t`.
pub fn step_logprob<M: NoisePredictor + ?Sized>(
    sched: &DiffusionSchedule,
    model: &M,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: &[f64],
) -> Result<f64> {
    sched.check_t(t, 1)?;
    let (eps, log_var) = model.predict_step(x_t, t, c)?;
    let mean = posterior_mean(sched, x_t, t, &eps);
    let lp = gaussian_logprob(x_prev, &mean, sched.step_variance(t, log_var).0)?;
    ensure_finite(lp, &format!("step log-probability at t={t}"))
}

/// A step log-density evaluated with enough state to backpropagate it.
pub struct StepDensity {
    pub logprob: f64,
    cache: ForwardCache,
    /// `d logp / d eps_hat`.
    dlogp_deps: Vec<f64>,
    /// `d logp / d v` for the log variance multiplier.
    dlogp_dlogvar: f64,
}

impl StepDensity {
    /// Accumulates `scale * d logp / d params` into `grad`.
    pub fn backward(&self, model: &Denoiser, scale: f64, grad: &mut Gradients) {
        if scale != 0.0 {
            let upstream: Vec<f64> = self.dlogp_deps.iter().map(|g| scale * g).collect();
            model.accumulate_step(&self.cache, &upstream, scale * self.dlogp_dlogvar, grad);
        }
    }
}

pub fn step_density(
    sched: &DiffusionSchedule,
    model: &Denoiser,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: &[f64],
) -> Result<StepDensity> {
    sched.check_t(t, 1)?;
    let cache = model.forward_cached(x_t, t, c)?;
    let (mean, slopes) = posterior_mean_with_grad(sched, x_t, t, model.eps_of(&cache));
    let (var, capped) = sched.step_variance(t, model.log_var_of(&cache));
    let logprob = ensure_finite(
        gaussian_logprob(x_prev, &mean, var)?,
        &format!("step log-probability at t={t}"),
    )?;
    let dlogp_deps = x_prev
        .iter()
        .zip(&mean)
        .zip(&slopes)
        .map(|((x, m), b)| b * (x - m) / var)
        .collect();
    let sq: f64 = x_prev.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum();
    Ok(StepDensity {
        logprob,
        cache,
        dlogp_deps,
        dlogp_dlogvar: if capped {
            0.0
        } else {
            sq / (2.0 * var) - 0.5 * x_prev.len() as f64
        },
    })
}

/// Like [`step_logprob`], additionally accumulating `scale * d logp / d params`
/// into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn step_logprob_grad(
    sched: &DiffusionSchedule,
    model: &Denoiser,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
    c: &[f64],
    scale: f64,
    grad: &mut Gradients,
) -> Result<f64> {
    let density = step_density(sched, model, x_t, x_prev, t, c)?;
    density.backward(model, scale, grad);
    Ok(density.logprob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Architecture};

    fn small_model(seed: u64, t_max: usize) -> Denoiser {
        let mut rng = RngState::new(seed);
        Denoiser::new(2, 1, t_max, Architecture { width: 8, depth: 2 }, &mut rng)
    }

    #[test]
    fn logprob_fixtures() {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_logprob(&[0.0], &[0.0], 1.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((gaussian_logprob(&[1.0], &[0.0], 1.0).unwrap() + 0.5 + half_log_2pi).abs() < 1e-15);
        let v = 0.37;
        let lp = gaussian_logprob(&[0.4, -2.0], &[0.4, -2.0], v).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI * v).ln()).abs() < 1e-14);
        assert!(matches!(gaussian_logprob(&[0.0], &[0.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_noise_lands_on_mean() {
        let sched = DiffusionSchedule::make(10, "linear").unwrap();
        let model = small_model(1, 10);
        let (x, rec) = reverse_step_with_noise(&sched, &model, &[0.3, -0.2], 4, &[1.0], vec![0.0; 2]).unwrap();
        assert_eq!(x, rec.mean);
    }

    #[test]
    fn trajectory_structure_and_replay() {
        let sched = DiffusionSchedule::make(2, "linear").unwrap();
        let model = small_model(2, 2);
        let traj = sample_trajectory(&sched, &model, &[0.5], &mut RngState::new(3)).unwrap();
        assert_eq!(traj.states.len(), 3);
        assert!(traj.replays_exactly());
        let again = sample_trajectory(&sched, &model, &[0.5], &mut RngState::new(3)).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn json_round_trip_preserves_logprobs() {
        let sched = DiffusionSchedule::make(6, "cosine").unwrap();
        let model = small_model(4, 6);
        let traj = sample_trajectory(&sched, &model, &[-1.0], &mut RngState::new(5)).unwrap();
        let text = traj.to_json().unwrap();
        assert!(text.contains(TRAJECTORY_SCHEMA));
        let back = Trajectory::from_json(&text).unwrap();
        assert_eq!(back, traj);
        assert_eq!(
            back.logprobs(&sched, &model).unwrap(),
            traj.logprobs(&sched, &model).unwrap()
        );
        let bad = text.replace(TRAJECTORY_SCHEMA, "prefdiff.trajectory/0");
        assert!(Trajectory::from_json(&bad).is_err());
    }

    #[test]
    fn recorded_density_matches_gaussian_of_record() {
        let sched = DiffusionSchedule::make(5, "linear").unwrap();
        let model = small_model(6, 5);
        let traj = sample_trajectory(&sched, &model, &[0.1], &mut RngState::new(7)).unwrap();
        let lps = traj.logprobs(&sched, &model).unwrap();
        for t in 1..=5 {
            let rec = traj.step(t);
            let direct = gaussian_logprob(traj.state(t - 1), &rec.mean, rec.variance).unwrap();
            assert!((direct - lps[t - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let sched = DiffusionSchedule::make(5, "linear").unwrap();
        let model = small_model(8, 5);
        let mut rng = RngState::new(9);
        // unit-scale states keep the central differences well conditioned
        let states: Vec<Vec<f64>> = (0..=5).map(|_| rng.gaussian(2)).collect();
        for t in [1, 3, 5] {
            let mut grad = model.zero_grad();
            step_logprob_grad(&sched, &model, &states[t], &states[t - 1], t, &[0.2], 1.0, &mut grad).unwrap();
            let report = grad_check(
                |p: &[f64]| step_logprob(&sched, &model.with_params(p), &states[t], &states[t - 1], t, &[0.2]).unwrap(),
                model.params(),
                grad.values(),
                1e-4,
            );
            assert!(report.passed, "t={t}: {report:?}");
        }
    }

    #[test]
    fn parallel_sampling_is_deterministic() {
        let sched = DiffusionSchedule::make(4, "linear").unwrap();
        let model = small_model(10, 4);
        let rng = RngState::new(11);
        let a = sample_many(&sched, &model, &[vec![0.0], vec![1.0]], 3, &rng).unwrap();
        let b = sample_many(&sched, &model, &[vec![0.0], vec![1.0]], 3, &rng).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(a[4].condition, vec![1.0]);
    }
}
