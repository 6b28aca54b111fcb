#![allow(dead_code)]

use prefdiff::diffusion::{DiffusionSchedule, StepRecord, Trajectory, TrajectoryPair};
use prefdiff::numerics::{Architecture, Denoiser, RngState};
use prefdiff::preference::PreferencePair;

pub const DIM: usize = 2;
pub const COND: usize = 1;

/// Small policy plus a reference that differs by a random perturbation.
pub fn models(t_max: usize, rng: &mut RngState) -> (Denoiser, Denoiser) {
    let reference = Denoiser::new(DIM, COND, t_max, Architecture { width: 8, depth: 2 }, rng);
    let mut policy = reference.clone();
    for p in policy.params_mut() {
        *p += 0.05 * rng.standard_normal();
    }
    (policy, reference)
}

/// A chain with unit-scale states. Each step record has mean `x_{t-1}` and
/// zero noise, so it replays exactly.
pub fn chain(sched: &DiffusionSchedule, c: &[f64], rng: &mut RngState) -> Trajectory {
    let t_max = sched.total_steps();
    let states: Vec<Vec<f64>> = (0..=t_max).map(|_| rng.gaussian(DIM)).collect();
    let steps = (1..=t_max)
        .map(|t| StepRecord {
            t,
            mean: states[t - 1].clone(),
            variance: sched.reverse_variance(t),
            noise: vec![0.0; DIM],
        })
        .collect();
    Trajectory {
        condition: c.to_vec(),
        states,
        steps,
    }
}

pub fn chain_pair(sched: &DiffusionSchedule, rng: &mut RngState) -> TrajectoryPair {
    let c = rng.gaussian(COND);
    TrajectoryPair::new(chain(sched, &c, rng), chain(sched, &c, rng)).unwrap()
}

pub fn noise_batch(n: usize, rng: &mut RngState) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| PreferencePair {
            c: rng.gaussian(COND),
            x_w: rng.gaussian(DIM),
            x_l: rng.gaussian(DIM),
            confidence: 1.0,
        })
        .collect()
}

/// `-ln(1 / (1 + e^-z))` written out directly.
pub fn plain_neg_log_sigmoid(z: f64) -> f64 {
    -(1.0 / (1.0 + (-z).exp())).ln()
}
