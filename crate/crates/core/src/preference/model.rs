//! Learned Bradley-Terry reward model `r_phi(c, x)`, optionally conditioned
//! on the diffusion timestep so it can rank noisy intermediate states.

use serde::{Deserialize, Serialize};

use super::{PreferencePair, Scorer};
use crate::diffusion::{forward_noise, DiffusionSchedule, ScheduleKind};
use crate::error::ensure_finite;
use crate::numerics::{
    neg_log_sigmoid, order_free_mean, sigmoid, time_embedding, Adam, AdamConfig, Architecture, Gradients, Mlp,
    RngState, TIME_FEATURES,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    net: Mlp,
    data_dim: usize,
    cond_dim: usize,
    /// `Some(T)` when the input carries a timestep embedding.
    total_steps: Option<usize>,
}

impl RewardModel {
    pub fn new(
        data_dim: usize,
        cond_dim: usize,
        total_steps: Option<usize>,
        arch: Architecture,
        rng: &mut RngState,
    ) -> Self {
        let time = if total_steps.is_some() { TIME_FEATURES } else { 0 };
        Self {
            net: Mlp::init(&arch.layer_sizes(data_dim + time + cond_dim, 1), rng),
            data_dim,
            cond_dim,
            total_steps,
        }
    }

    pub fn time_conditioned(&self) -> bool {
        self.total_steps.is_some()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        let mut out = self.clone();
        out.net.params_mut().copy_from_slice(params);
        out
    }

    fn encode(&self, x: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.data_dim || c.len() != self.cond_dim {
            return Err(Error::config(format!(
                "reward model expects (x, c) dims ({}, {}), got ({}, {})",
                self.data_dim,
                self.cond_dim,
                x.len(),
                c.len()
            )));
        }
        let mut input = x.to_vec();
        if let Some(total) = self.total_steps {
            if t > total {
                return Err(Error::contract(format!("timestep {t} outside 0..={total}")));
            }
            input.extend_from_slice(&time_embedding(t, total));
        } else if t != 0 {
            return Err(Error::contract(
                "reward model has no timestep conditioning; only t = 0 is valid",
            ));
        }
        input.extend_from_slice(c);
        Ok(input)
    }

    /// Score of `x` at noise level `t` (`t = 0` for clean samples).
    pub fn score_at(&self, x: &[f64], t: usize, c: &[f64]) -> Result<f64> {
        let s = self.net.forward(&self.encode(x, t, c)?)[0];
        ensure_finite(s, "reward model score")
    }

    fn accumulate(&self, x: &[f64], t: usize, c: &[f64], upstream: f64, grad: &mut Gradients) -> Result<f64> {
        let cache = self.net.forward_cached(&self.encode(x, t, c)?);
        let s = cache.output()[0];
        self.net.backward(&cache, &[upstream], grad.values_mut());
        Ok(s)
    }
}

impl Scorer for RewardModel {
    fn score(&self, c: &[f64], x: &[f64]) -> Result<f64> {
        self.score_at(x, 0, c)
    }
}

/// Score of a noisy state; refuses models trained without timesteps.
pub fn stepwise_score(rm: &RewardModel, x_t: &[f64], t: usize, c: &[f64]) -> Result<f64> {
    if !rm.time_conditioned() {
        return Err(Error::contract(
            "stepwise scoring needs a reward model trained with timestep conditioning",
        ));
    }
    rm.score_at(x_t, t, c)
}

/// Mean of `-log sigma(r(x_w) - r(x_l))` over clean pairs, with its gradient.
pub fn bt_loss(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<(f64, Gradients)> {
    bt_loss_at(rm, pairs, &vec![0; pairs.len()])
}

/// [`bt_loss`] where pair `i` is scored at timestep `steps[i]`.
pub fn bt_loss_at(rm: &RewardModel, pairs: &[PreferencePair], steps: &[usize]) -> Result<(f64, Gradients)> {
    if pairs.is_empty() {
        return Err(Error::contract("empty preference batch"));
    }
    if steps.len() != pairs.len() {
        return Err(Error::contract("one timestep per pair is required"));
    }
    let n = pairs.len() as f64;
    let mut grad = Gradients::zeros(rm.num_params());
    let mut losses = Vec::with_capacity(pairs.len());
    for (p, &t) in pairs.iter().zip(steps) {
        let s_w = rm.score_at(&p.x_w, t, &p.c)?;
        let s_l = rm.score_at(&p.x_l, t, &p.c)?;
        let z = s_w - s_l;
        losses.push(neg_log_sigmoid(z));
        let g = -sigmoid(-z) / n;
        rm.accumulate(&p.x_w, t, &p.c, g, &mut grad)?;
        rm.accumulate(&p.x_l, t, &p.c, -g, &mut grad)?;
    }
    Ok((ensure_finite(order_free_mean(&losses), "Bradley-Terry loss")?, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardFitConfig {
    pub arch: Architecture,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of pairs held out for the accuracy report.
    pub holdout: f64,
    /// When set, each training pair is noised to a uniform `t` in `0..=T`
    /// with this schedule; both samples keep the clean-sample label.
    pub time_conditioning: Option<(usize, ScheduleKind)>,
}

impl Default for RewardFitConfig {
    fn default() -> Self {
        Self {
            arch: Architecture { width: 32, depth: 2 },
            steps: 1500,
            batch_size: 64,
            lr: 3e-3,
            holdout: 0.2,
            time_conditioning: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    #[serde(with = "crate::numerics::nonfinite")]
    pub final_loss: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub heldout_accuracy: f64,
}

/// Fraction of pairs whose winner outscores the loser at `t = 0`.
pub fn pairwise_accuracy<S: Scorer + ?Sized>(scorer: &S, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut right = 0usize;
    for p in pairs {
        if scorer.score(&p.c, &p.x_w)? > scorer.score(&p.c, &p.x_l)? {
            right += 1;
        }
    }
    Ok(right as f64 / pairs.len() as f64)
}

pub fn train_reward_model(
    pairs: &[PreferencePair],
    config: &RewardFitConfig,
    rng: &mut RngState,
) -> Result<(RewardModel, FitReport)> {
    if pairs.len() < 100 {
        return Err(Error::contract(format!(
            "reward model training needs at least 100 pairs, got {}",
            pairs.len()
        )));
    }
    if !(0.0..1.0).contains(&config.holdout) || config.batch_size == 0 {
        return Err(Error::config("holdout must lie in [0, 1) and batch_size be positive"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let n_hold = (pairs.len() as f64 * config.holdout).round() as usize;
    let (held, train) = order.split_at(n_hold);
    let held: Vec<PreferencePair> = held.iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<&PreferencePair> = train.iter().map(|&i| &pairs[i]).collect();

    let noise = match config.time_conditioning {
        Some((total, kind)) => Some(DiffusionSchedule::new(total, kind)?),
        None => None,
    };
    let first = &pairs[0];
    let mut rm = RewardModel::new(
        first.x_w.len(),
        first.c.len(),
        noise.as_ref().map(|s| s.total_steps()),
        config.arch,
        rng,
    );
    let mut adam = Adam::new(
        AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::with_lr(config.lr)
        },
        rm.num_params(),
    );
    let mut final_loss = f64::NAN;
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut steps = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let p = train[rng.below(train.len())];
            match &noise {
                Some(sched) => {
                    let t = rng.below(sched.total_steps() + 1);
                    let d = p.x_w.len();
                    batch.push(PreferencePair {
                        c: p.c.clone(),
                        x_w: forward_noise(sched, &p.x_w, t, &rng.gaussian(d))?,
                        x_l: forward_noise(sched, &p.x_l, t, &rng.gaussian(d))?,
                        confidence: p.confidence,
                    });
                    steps.push(t);
                }
                None => {
                    batch.push(p.clone());
                    steps.push(0);
                }
            }
        }
        let (loss, grad) = bt_loss_at(&rm, &batch, &steps)?;
        adam.step(rm.params_mut(), &grad)?;
        final_loss = loss;
    }
    let heldout_accuracy = pairwise_accuracy(&rm, &held)?;
    Ok((
        rm,
        FitReport {
            train_pairs: train.len(),
            heldout_pairs: held.len(),
            final_loss,
            heldout_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn linear_pairs(n: usize, seed: u64, shuffle_labels: bool) -> Vec<PreferencePair> {
        let w = [1.0, -2.0];
        let mut rng = RngState::new(seed);
        (0..n)
            .map(|_| {
                let a = rng.gaussian(2);
                let b = rng.gaussian(2);
                let ra = w[0] * a[0] + w[1] * a[1];
                let rb = w[0] * b[0] + w[1] * b[1];
                let a_wins = if shuffle_labels { rng.uniform() < 0.5 } else { ra > rb };
                let (x_w, x_l) = if a_wins { (a, b) } else { (b, a) };
                PreferencePair {
                    c: vec![],
                    x_w,
                    x_l,
                    confidence: sigmoid((ra - rb).abs()),
                }
            })
            .collect()
    }

    #[test]
    fn equal_scores_give_ln2() {
        let mut rng = RngState::new(1);
        let mut rm = RewardModel::new(2, 0, None, Architecture { width: 4, depth: 1 }, &mut rng);
        rm.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let pairs = linear_pairs(10, 2, false);
        let (loss, _) = bt_loss(&rm, &pairs).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_gap_gives_tiny_loss() {
        // a linear scorer r(x) = 10 * x0 on pairs whose winner has x0 = 1, loser 0
        let net = Mlp::from_params(&[1, 1], vec![10.0, 0.0]).unwrap();
        let rm = RewardModel {
            net,
            data_dim: 1,
            cond_dim: 0,
            total_steps: None,
        };
        let pairs = vec![
            PreferencePair {
                c: vec![],
                x_w: vec![1.0],
                x_l: vec![0.0],
                confidence: 1.0
            };
            3
        ];
        assert!(bt_loss(&rm, &pairs).unwrap().0 < 1e-4);
    }

    #[test]
    fn bt_gradient_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let rm = RewardModel::new(2, 1, Some(10), Architecture { width: 6, depth: 2 }, &mut rng);
        let pairs: Vec<_> = linear_pairs(5, 4, false)
            .into_iter()
            .map(|mut p| {
                p.c = vec![0.5];
                p
            })
            .collect();
        let steps = [0, 3, 10, 1, 7];
        let (_, grad) = bt_loss_at(&rm, &pairs, &steps).unwrap();
        let report = grad_check(
            |p: &[f64]| bt_loss_at(&rm.with_params(p), &pairs, &steps).unwrap().0,
            rm.params(),
            grad.values(),
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fit_separable_and_random() {
        let cfg = RewardFitConfig {
            steps: 400,
            ..RewardFitConfig::default()
        };
        let (_, good) = train_reward_model(&linear_pairs(2000, 5, false), &cfg, &mut RngState::new(6)).unwrap();
        assert!(good.heldout_accuracy > 0.9, "{good:?}");
        let (_, noise) = train_reward_model(&linear_pairs(2000, 7, true), &cfg, &mut RngState::new(6)).unwrap();
        assert!((noise.heldout_accuracy - 0.5).abs() < 0.05, "{noise:?}");
        let pairs = linear_pairs(300, 8, false);
        let a = train_reward_model(&pairs, &cfg, &mut RngState::new(9)).unwrap();
        let b = train_reward_model(&pairs.clone(), &cfg, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(train_reward_model(&pairs[..99], &cfg, &mut RngState::new(9)).is_err());
    }

    #[test]
    fn stepwise_scoring_contract() {
        let mut rng = RngState::new(10);
        let plain = RewardModel::new(2, 0, None, Architecture { width: 4, depth: 1 }, &mut rng);
        assert!(matches!(
            stepwise_score(&plain, &[0.0, 0.0], 3, &[]),
            Err(Error::Contract(_))
        ));
        let timed = RewardModel::new(2, 0, Some(5), Architecture { width: 4, depth: 1 }, &mut rng);
        let a = stepwise_score(&timed, &[0.3, 0.1], 3, &[]).unwrap();
        assert_eq!(a, stepwise_score(&timed, &[0.3, 0.1], 3, &[]).unwrap());
    }

    #[test]
    fn shift_invariance_of_bt_loss() {
        let mut rng = RngState::new(11);
        let mut rm = RewardModel::new(2, 0, None, Architecture { width: 5, depth: 1 }, &mut rng);
        let pairs = linear_pairs(20, 12, false);
        let (before, _) = bt_loss(&rm, &pairs).unwrap();
        let last = rm.num_params() - 1;
        rm.params_mut()[last] += 3.7;
        let (after, _) = bt_loss(&rm, &pairs).unwrap();
        assert!((before - after).abs() < 1e-12);
    }
}
