use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ProxySpec, RunConfig};
use super::log::{LogRow, RunLog};
use crate::data::{model_to_pixels, Dataset, DatasetKind, GaussianMixture};
use crate::diffusion::{
    posterior_mean, reverse_step, sample_many, sample_trajectory, DiffusionSchedule, Trajectory, TrajectoryPair,
};
use crate::metrics::{diversity_protocol, entropy_bits, mode_coverage, GrayImage};
use crate::numerics::{order_free_mean, Adam, Denoiser, Gradients, NoisePredictor, RngState};
use crate::objectives::{
    d3po_step_loss_cached, draw_noise, gaussian_kl, noise_loss_with_draws, shared_state_step_loss, Granularity,
    NoiseForm, ReferenceCache, StepPair, Variant,
};
use crate::preference::{first_wins, stepwise_score, train_reward_model, PreferencePair, RewardModel, Scorer};
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "prefdiff.checkpoint/1";

const EVAL_STREAM: u64 = 0x4556_414c;
const PROXY_STREAM: u64 = 0x5052_4f58;
const COLLECT_OFFSET: u64 = 1 << 32;
const OCCUPANCY_BINS: usize = 16;
const OCCUPANCY_RANGE: f64 = 2.5;

/// One labelled training example, in the form its loss consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetEntry {
    Chain {
        pair: TrajectoryPair,
        reference: ReferenceCache,
    },
    Step {
        pair: StepPair,
        ref_w: f64,
        ref_l: f64,
    },
    Clean {
        pair: PreferencePair,
    },
}

/// Everything that changes during a run. Serializing it is a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    pub policy: Denoiser,
    pub optimizer: Adam,
    pub rng: RngState,
    pub dataset: Vec<DatasetEntry>,
    pub log: RunLog,
    pub proxy_model: Option<RewardModel>,
    pub reference_checksum: u64,
    /// Training losses since the last log row.
    pub pending_losses: Vec<f64>,
}

impl TrainerState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "schema": CHECKPOINT_SCHEMA,
            "state": self,
        }))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Envelope {
            schema: String,
            state: TrainerState,
        }
        let env: Envelope = serde_json::from_str(text)?;
        if env.schema != CHECKPOINT_SCHEMA {
            return Err(Error::config(format!(
                "checkpoint schema `{}` is not `{CHECKPOINT_SCHEMA}`",
                env.schema
            )));
        }
        Ok(env.state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::Missing(format!("checkpoint {}", path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Online (or offline) preference fine-tuning of a copy of a frozen
/// reference denoiser.
pub struct Trainer {
    config: RunConfig,
    sched: DiffusionSchedule,
    reference: Denoiser,
    data: Box<dyn Dataset>,
    state: TrainerState,
}

impl Trainer {
    /// Starts a run: fits the proxy if it is learned, labels the initial
    /// pairs and evaluates the untouched policy as row 0.
    pub fn new(config: RunConfig, sched: DiffusionSchedule, reference: Denoiser) -> Result<Self> {
        check_setup(&config, &sched, &reference)?;
        let data = config.dataset.build();
        let mut trainer = Self {
            state: TrainerState {
                iteration: 0,
                policy: reference.clone(),
                optimizer: Adam::new(config.optimizer.clone(), reference.num_params()),
                rng: RngState::new(config.seed),
                dataset: Vec::new(),
                log: RunLog::default(),
                proxy_model: None,
                reference_checksum: reference.checksum(),
                pending_losses: Vec::new(),
            },
            config,
            sched,
            reference,
            data,
        };
        trainer.state.proxy_model = trainer.fit_proxy()?;
        let initial = trainer.collect(&trainer.state.policy, trainer.config.initial_pairs, 0)?;
        trainer.state.dataset = initial;
        let row = trainer.evaluate(&trainer.state)?;
        trainer.state.log.rows.push(row);
        Ok(trainer)
    }

    /// Continues from a checkpoint. The reference must be the one the run
    /// started from.
    pub fn resume(
        config: RunConfig,
        sched: DiffusionSchedule,
        reference: Denoiser,
        state: TrainerState,
    ) -> Result<Self> {
        check_setup(&config, &sched, &reference)?;
        if state.reference_checksum != reference.checksum() {
            return Err(Error::contract(
                "checkpoint was trained against a different reference model",
            ));
        }
        if state.policy.num_params() != reference.num_params() {
            return Err(Error::contract(
                "checkpoint policy does not match the reference architecture",
            ));
        }
        let data = config.dataset.build();
        Ok(Self {
            config,
            sched,
            reference,
            data,
            state,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn reference(&self) -> &Denoiser {
        &self.reference
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn log(&self) -> &RunLog {
        &self.state.log
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// One iteration: sample and label new pairs from the current policy
    /// (online runs only), then take the configured optimizer steps. Returns
    /// the evaluation row when this iteration lands on the cadence. The state
    /// is only replaced when everything succeeded.
    pub fn run_online_iteration(&mut self) -> Result<Option<LogRow>> {
        let mut next = self.state.clone();
        next.iteration += 1;
        if self.config.online {
            let fresh = self.collect(&next.policy, self.config.pairs_per_iteration, next.iteration as u64)?;
            next.dataset.extend(fresh);
        }
        for _ in 0..self.config.updates_per_iteration {
            let loss = self.update(&mut next)?;
            next.pending_losses.push(loss);
        }
        if self.reference.checksum() != next.reference_checksum {
            return Err(Error::contract("reference parameters changed during training"));
        }
        let row = if next.iteration.is_multiple_of(self.config.eval_every) || next.iteration == self.config.iterations {
            let row = self.evaluate(&next)?;
            next.log.rows.push(row.clone());
            next.pending_losses.clear();
            Some(row)
        } else {
            None
        };
        self.state = next;
        Ok(row)
    }

    /// Runs until `config.iterations` (or `max_iterations` more, whichever
    /// comes first). With a checkpoint directory, `latest.json` is rewritten
    /// at every evaluation row, and a numerical abort leaves the last good
    /// state in `last_good.json`.
    pub fn run(&mut self, max_iterations: Option<usize>, checkpoint_dir: Option<&Path>) -> Result<&RunLog> {
        let budget = max_iterations.unwrap_or(usize::MAX);
        let mut done = 0;
        while !self.is_finished() && done < budget {
            match self.run_online_iteration() {
                Ok(row) => {
                    if let (Some(_), Some(dir)) = (row, checkpoint_dir) {
                        self.state.save(&latest_checkpoint(dir))?;
                    }
                }
                Err(e) => {
                    if let (Error::Numerical(_), Some(dir)) = (&e, checkpoint_dir) {
                        self.state.save(&dir.join("last_good.json"))?;
                    }
                    return Err(e);
                }
            }
            done += 1;
        }
        Ok(&self.state.log)
    }

    fn fit_proxy(&self) -> Result<Option<RewardModel>> {
        let ProxySpec::Learned { reward, pairs, fit } = &self.config.proxy else {
            return Ok(None);
        };
        let base = RngState::with_stream(self.config.seed, PROXY_STREAM);
        let conditions = self.data.conditions();
        let labelled: Vec<PreferencePair> = (0..*pairs)
            .into_par_iter()
            .map(|i| {
                let mut rng = base.split(i as u64);
                let c = &conditions[i % conditions.len()];
                let a = sample_trajectory(&self.sched, &self.reference, c, &mut rng)?;
                let b = sample_trajectory(&self.sched, &self.reference, c, &mut rng)?;
                let (ra, rb) = (reward.reward(c, a.sample())?, reward.reward(c, b.sample())?);
                let a_wins = first_wins(ra, rb, a.sample(), b.sample(), self.config.label_mode, &mut rng);
                let (w, l) = if a_wins { (a, b) } else { (b, a) };
                Ok(PreferencePair {
                    c: c.clone(),
                    x_w: w.sample().to_vec(),
                    x_l: l.sample().to_vec(),
                    confidence: crate::preference::bt_probability((ra - rb).abs(), 0.0),
                })
            })
            .collect::<Result<_>>()?;
        let mut fit = fit.clone();
        if self.config.loss.variant.granularity() == Granularity::SharedState && fit.time_conditioning.is_none() {
            fit.time_conditioning = Some((self.sched.total_steps(), self.sched.kind()));
        }
        let (rm, _) = train_reward_model(&labelled, &fit, &mut base.split(u64::MAX))?;
        Ok(Some(rm))
    }

    /// Proxy score of a clean sample.
    fn proxy_score(&self, proxy_model: Option<&RewardModel>, c: &[f64], x0: &[f64]) -> Result<f64> {
        match proxy_model {
            Some(rm) => rm.score(c, x0),
            None => self.config.proxy.reward().reward(c, x0),
        }
    }

    /// Proxy score of a state at noise level `level`. A learned time-aware
    /// model scores it directly; a synthetic reward scores the reference's
    /// denoised estimate `(x - sigma eps_ref) / alpha`.
    fn noisy_proxy_score(&self, proxy_model: Option<&RewardModel>, c: &[f64], x: &[f64], level: usize) -> Result<f64> {
        if level == 0 {
            return self.proxy_score(proxy_model, c, x);
        }
        match proxy_model {
            Some(rm) if rm.time_conditioned() => stepwise_score(rm, x, level, c),
            _ => {
                let eps = self.reference.predict_noise(x, level, c)?;
                let (a, s) = (self.sched.alpha(level), self.sched.sigma(level));
                let x0: Vec<f64> = x.iter().zip(&eps).map(|(xi, ei)| (xi - s * ei) / a).collect();
                self.proxy_score(proxy_model, c, &x0)
            }
        }
    }

    /// Samples `n` labelled pairs from `policy` in the form the configured
    /// loss consumes. Pair `i` uses its own stream, so the result does not
    /// depend on the thread count.
    fn collect(&self, policy: &Denoiser, n: usize, round: u64) -> Result<Vec<DatasetEntry>> {
        let base = RngState::with_stream(self.config.seed, COLLECT_OFFSET + round);
        let conditions = self.data.conditions();
        let proxy_model = self.state.proxy_model.as_ref();
        let mode = self.config.label_mode;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = base.split(i as u64);
                let c = &conditions[i % conditions.len()];
                match self.config.loss.variant.granularity() {
                    Granularity::Chain | Granularity::Noise => {
                        let a = sample_trajectory(&self.sched, policy, c, &mut rng)?;
                        let b = sample_trajectory(&self.sched, policy, c, &mut rng)?;
                        let ra = self.proxy_score(proxy_model, c, a.sample())?;
                        let rb = self.proxy_score(proxy_model, c, b.sample())?;
                        let a_wins = first_wins(ra, rb, a.sample(), b.sample(), mode, &mut rng);
                        let (w, l) = if a_wins { (a, b) } else { (b, a) };
                        if self.config.loss.variant.granularity() == Granularity::Noise {
                            return Ok(DatasetEntry::Clean {
                                pair: PreferencePair {
                                    c: c.clone(),
                                    x_w: w.sample().to_vec(),
                                    x_l: l.sample().to_vec(),
                                    confidence: crate::preference::bt_probability((ra - rb).abs(), 0.0),
                                },
                            });
                        }
                        let pair = TrajectoryPair::new(w, l)?;
                        let reference = ReferenceCache::compute(&pair, &self.sched, &self.reference)?;
                        Ok(DatasetEntry::Chain { pair, reference })
                    }
                    Granularity::SharedState => {
                        let total = self.sched.total_steps();
                        let t = 1 + rng.below(total);
                        let mut x = rng.gaussian(policy.data_dim());
                        for s in ((t + 1)..=total).rev() {
                            x = reverse_step(&self.sched, policy, &x, s, c, &mut rng)?.0;
                        }
                        let (xa, _) = reverse_step(&self.sched, policy, &x, t, c, &mut rng)?;
                        let (xb, _) = reverse_step(&self.sched, policy, &x, t, c, &mut rng)?;
                        let ra = self.noisy_proxy_score(proxy_model, c, &xa, t - 1)?;
                        let rb = self.noisy_proxy_score(proxy_model, c, &xb, t - 1)?;
                        let a_wins = first_wins(ra, rb, &xa, &xb, mode, &mut rng);
                        let (w, l) = if a_wins { (xa, xb) } else { (xb, xa) };
                        let pair = StepPair::shared_state(c, t, &x, &w, &l);
                        let (ref_w, ref_l) = pair.reference_logprobs(&self.sched, &self.reference)?;
                        Ok(DatasetEntry::Step { pair, ref_w, ref_l })
                    }
                    Granularity::Bandit => Err(Error::config("bandit objectives have no diffusion dataset")),
                }
            })
            .collect()
    }

    /// One optimizer step on a uniformly drawn minibatch.
    fn update(&self, state: &mut TrainerState) -> Result<f64> {
        if state.dataset.is_empty() {
            return Err(Error::contract("no preference pairs to train on"));
        }
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| state.rng.below(state.dataset.len()))
            .collect();
        let loss_cfg = &self.config.loss;
        let (beta, gamma) = (loss_cfg.beta, loss_cfg.gamma);
        let policy = &state.policy;
        let (loss, grad) = if loss_cfg.variant.granularity() == Granularity::Noise {
            let batch: Vec<PreferencePair> = picks
                .iter()
                .map(|&i| match &state.dataset[i] {
                    DatasetEntry::Clean { pair } => Ok(pair.clone()),
                    _ => Err(Error::contract("noise objectives need clean preference pairs")),
                })
                .collect::<Result<_>>()?;
            let draws = draw_noise(&batch, &self.sched, &mut state.rng);
            let form = match loss_cfg.variant {
                Variant::SeeNoiseA => NoiseForm::see_a(gamma),
                Variant::SeeNoiseB => NoiseForm::see_b(gamma),
                _ => NoiseForm::BASE,
            };
            noise_loss_with_draws(form, &batch, &draws, &self.sched, policy, &self.reference, beta)?
        } else {
            let parts: Vec<(f64, Gradients)> = picks
                .par_iter()
                .map(|&i| self.entry_loss(policy, &state.dataset[i], beta, gamma))
                .collect::<Result<_>>()?;
            let mut grad = policy.zero_grad();
            let losses: Vec<f64> = parts.iter().map(|(l, _)| *l).collect();
            for (_, g) in &parts {
                grad.add_scaled(g, 1.0 / parts.len() as f64);
            }
            (order_free_mean(&losses), grad)
        };
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "training loss is {loss} at iteration {}",
                state.iteration
            )));
        }
        state.optimizer.step(state.policy.params_mut(), &grad)?;
        if state.policy.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::numerical("policy parameters became non-finite"));
        }
        Ok(loss)
    }

    /// Step loss of one entry; chain pairs average over all `T` steps.
    fn entry_loss(&self, policy: &Denoiser, entry: &DatasetEntry, beta: f64, gamma: f64) -> Result<(f64, Gradients)> {
        match entry {
            DatasetEntry::Chain { pair, reference } => {
                let total = pair.total_steps();
                let mut grad = policy.zero_grad();
                let mut losses = Vec::with_capacity(total);
                for k in 1..=total {
                    let (l, g) = d3po_step_loss_cached(pair, reference, &self.sched, policy, k, beta, gamma)?;
                    losses.push(l);
                    grad.add_scaled(&g, 1.0 / total as f64);
                }
                Ok((order_free_mean(&losses), grad))
            }
            DatasetEntry::Step { pair, .. } => {
                shared_state_step_loss(pair, &self.sched, policy, &self.reference, beta, gamma)
            }
            DatasetEntry::Clean { .. } => Err(Error::contract("clean pairs need a noise objective")),
        }
    }

    /// Evaluates `state.policy` on a fixed evaluation stream, so successive
    /// rows differ only through the parameters.
    pub fn evaluate(&self, state: &TrainerState) -> Result<LogRow> {
        let conditions = self.data.conditions();
        let per_condition = self.config.eval_samples.div_ceil(conditions.len());
        let eval_rng = RngState::with_stream(self.config.seed, EVAL_STREAM);
        let policy = &state.policy;
        let chains = sample_many(&self.sched, policy, &conditions, per_condition, &eval_rng)?;
        let proxy_model = state.proxy_model.as_ref();
        let truth = &self.config.true_reward;
        let scored: Vec<(f64, f64, f64)> = chains
            .par_iter()
            .map(|traj| {
                let c = &traj.condition;
                Ok((
                    self.proxy_score(proxy_model, c, traj.sample())?,
                    truth.reward(c, traj.sample())?,
                    self.chain_kl(traj)?,
                ))
            })
            .collect::<Result<_>>()?;
        let n = scored.len() as f64;
        let proxy_reward = scored.iter().map(|s| s.0).sum::<f64>() / n;
        let true_reward = scored.iter().map(|s| s.1).sum::<f64>() / n;
        let kl = scored.iter().map(|s| s.2).sum::<f64>() / n;
        let kl_var = scored.iter().map(|s| (s.2 - kl).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mut row = LogRow {
            step: state.iteration,
            proxy_reward,
            true_reward,
            kl,
            kl_stderr: (kl_var / n).sqrt(),
            e1: f64::NAN,
            e2: f64::NAN,
            rmse: f64::NAN,
            psnr: f64::NAN,
            ssim: f64::NAN,
            loss: if state.pending_losses.is_empty() {
                f64::NAN
            } else {
                order_free_mean(&state.pending_losses)
            },
            dataset_size: state.dataset.len(),
            coverage: Vec::new(),
        };
        match self.config.dataset {
            DatasetKind::Mixture4 => {
                let samples: Vec<Vec<f64>> = chains.iter().map(|t| t.sample().to_vec()).collect();
                let coverage = mode_coverage(&samples, &GaussianMixture::four_modes().centers)?;
                row.e1 = entropy_bits(&coverage);
                row.e2 = occupancy_entropy(&samples);
                row.coverage = coverage;
            }
            DatasetKind::Blobs8x8 => {
                let side = (policy.data_dim() as f64).sqrt() as usize;
                let sampler = |prompt: &[f64], rng: &mut RngState| -> Result<GrayImage> {
                    let traj = sample_trajectory(&self.sched, policy, prompt, rng)?;
                    GrayImage::new(side, side, model_to_pixels(traj.sample()))
                };
                let reports = diversity_protocol(&sampler, &conditions, &mut eval_rng.split(u64::MAX))?;
                let k = reports.len() as f64;
                row.rmse = reports.iter().map(|r| r.rmse).sum::<f64>() / k;
                row.psnr = reports.iter().map(|r| r.psnr).sum::<f64>() / k;
                row.ssim = reports.iter().map(|r| r.ssim).sum::<f64>() / k;
                row.e1 = reports.iter().map(|r| r.e1).sum::<f64>() / k;
                row.e2 = reports.iter().map(|r| r.e2).sum::<f64>() / k;
            }
        }
        Ok(row)
    }

    /// `sum_t KL(policy step || reference step)` along one policy chain.
    fn chain_kl(&self, traj: &Trajectory) -> Result<f64> {
        let c = &traj.condition;
        let mut kl = 0.0;
        for t in 1..=self.sched.total_steps() {
            let x_t = traj.state(t);
            let step = traj.step(t);
            let (eps_ref, log_var_ref) = self.reference.predict_step(x_t, t, c)?;
            let mu_ref = posterior_mean(&self.sched, x_t, t, &eps_ref);
            let var_ref = self.sched.step_variance(t, log_var_ref).0;
            kl += gaussian_kl(&step.mean, step.variance, &mu_ref, var_ref);
        }
        Ok(kl)
    }
}

pub(crate) fn latest_checkpoint(dir: &Path) -> PathBuf {
    dir.join("latest.json")
}

fn check_setup(config: &RunConfig, sched: &DiffusionSchedule, reference: &Denoiser) -> Result<()> {
    config.validate()?;
    if config.loss.total_steps != sched.total_steps() || reference.total_steps() != sched.total_steps() {
        return Err(Error::config(format!(
            "T disagrees: loss {}, schedule {}, reference {}",
            config.loss.total_steps,
            sched.total_steps(),
            reference.total_steps()
        )));
    }
    let data = config.dataset.build();
    if reference.data_dim() != data.data_dim() || reference.cond_dim() != data.cond_dim() {
        return Err(Error::config(format!(
            "reference model ({}-dim data, {}-dim condition) does not fit dataset {:?}",
            reference.data_dim(),
            reference.cond_dim(),
            config.dataset
        )));
    }
    Ok(())
}

/// Entropy (bits) of a square occupancy histogram of 2-D samples; points
/// outside the range fall into the edge bins.
fn occupancy_entropy(samples: &[Vec<f64>]) -> f64 {
    let mut counts = vec![0usize; OCCUPANCY_BINS * OCCUPANCY_BINS];
    let bin = |v: f64| {
        let u = (v + OCCUPANCY_RANGE) / (2.0 * OCCUPANCY_RANGE);
        ((u * OCCUPANCY_BINS as f64).floor().max(0.0) as usize).min(OCCUPANCY_BINS - 1)
    };
    for s in samples {
        counts[bin(s[0]) * OCCUPANCY_BINS + bin(s[1])] += 1;
    }
    let n = samples.len() as f64;
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    entropy_bits(&p)
}
