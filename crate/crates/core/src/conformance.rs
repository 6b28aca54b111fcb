//! Registry of numerical properties, each checked against an independent
//! oracle: hand-expanded formulas, finite differences, brute-force search
//! or Monte-Carlo moments.
//!
//! Every property has a stable identifier `module.name`. [`run`] evaluates
//! the registry and returns a machine-readable report. A [`Mutation`] swaps
//! a deliberately wrong formula into the code under test, so a negative
//! control can confirm that the corresponding property notices.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::diffusion::{
    forward_noise, sample_trajectory, step_logprob, DiffusionSchedule, StepRecord, Trajectory, TrajectoryPair,
};
use crate::metrics::{entropy_1d, psnr, rmse, ssim, GrayImage};
use crate::numerics::{grad_check, Architecture, Denoiser, Gradients, RngState};
use crate::objectives::{
    closed_form_policy, d3po_step_loss, d3po_step_loss_cached, draw_noise, flatten_distribution, full_chain_loss,
    noise_loss_with_draws, regularized_objective, shared_state_step_loss, step_loss_from_logprobs, stepwise_bound_loss,
    DiscretePolicy, LossConfig, NoiseForm, ReferenceCache, StepLogProbs, StepPair, Variant,
};
use crate::preference::{bt_loss, bt_probability, first_wins, LabelMode, PreferencePair, RewardModel};
use crate::trainer::{RunConfig, Trainer};

pub const REPORT_SCHEMA: &str = "prefdiff.conformance/1";

/// Deliberate defects for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// The first noise form scales the policy bracket by `(1 + gamma)^2`
    /// instead of `1 + gamma`.
    GammaScaling,
}

impl std::str::FromStr for Mutation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gamma-scaling" => Ok(Mutation::GammaScaling),
            other => Err(crate::Error::config(format!("unknown mutation `{other}`"))),
        }
    }
}

type Check = fn(Option<Mutation>) -> Result<String, String>;

pub struct Property {
    pub id: &'static str,
    pub statement: &'static str,
    check: Check,
}

impl Property {
    pub fn check(&self, mutation: Option<Mutation>) -> PropertyOutcome {
        let start = Instant::now();
        let result = (self.check)(mutation);
        PropertyOutcome {
            id: self.id.to_string(),
            statement: self.statement.to_string(),
            passed: result.is_ok(),
            detail: result.unwrap_or_else(|e| e),
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub id: String,
    pub statement: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub schema: String,
    pub mutation: Option<Mutation>,
    pub outcomes: Vec<PropertyOutcome>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&PropertyOutcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }

    pub fn outcome(&self, id: &str) -> Option<&PropertyOutcome> {
        self.outcomes.iter().find(|o| o.id == id)
    }
}

pub fn registry() -> Vec<Property> {
    macro_rules! p {
        ($id:expr, $statement:expr, $check:expr) => {
            Property {
                id: $id,
                statement: $statement,
                check: $check,
            }
        };
    }
    vec![
        p!(
            "numerics.determinism",
            "fixed seeds replay sampling and losses bit for bit",
            numerics_determinism
        ),
        p!(
            "numerics.gradient_fidelity",
            "analytic loss gradients match central differences (rel < 1e-4)",
            gradient_fidelity
        ),
        p!(
            "numerics.purity",
            "forward and backward passes leave no hidden state",
            numerics_purity
        ),
        p!(
            "diffusion.marginal_consistency",
            "forward noise has mean alpha_t x0 and variance sigma_t^2",
            marginal_consistency
        ),
        p!(
            "diffusion.record_replay",
            "recorded trajectories replay their exact step log-densities",
            record_replay
        ),
        p!(
            "diffusion.pretrain_coverage",
            "a pretrained mixture model gives every mode >= 5% of 1000 samples",
            pretrain_coverage
        ),
        p!(
            "preference.bt_swap",
            "bt_probability(b, a) = 1 - bt_probability(a, b)",
            bt_swap
        ),
        p!(
            "preference.argmax_invariance",
            "deterministic labels survive strictly monotone reward maps",
            argmax_invariance
        ),
        p!(
            "preference.bt_shift_invariance",
            "bt_loss ignores a constant added to every score",
            bt_shift_invariance
        ),
        p!(
            "objectives.gamma_zero_reduction",
            "every self-entropy loss at gamma 0 equals its base loss",
            gamma_zero_reduction
        ),
        p!(
            "objectives.form_equivalence",
            "noise form A at beta equals form B at (1+gamma) beta",
            form_equivalence
        ),
        p!(
            "objectives.flattening_equivalence",
            "step loss at gamma equals base loss with scaled beta and flattened reference",
            flattening_equivalence
        ),
        p!(
            "objectives.closed_form_optimality",
            "the closed-form policy beats every 1e-3 simplex grid point",
            closed_form_optimality
        ),
        p!(
            "objectives.entropy_monotonicity",
            "flattening never lowers entropy as gamma grows",
            entropy_monotonicity
        ),
        p!(
            "objectives.permutation_invariance",
            "losses ignore batch order",
            permutation_invariance
        ),
        p!(
            "objectives.margin_monotonicity",
            "losses fall strictly as the winner-loser log-ratio gap grows",
            margin_monotonicity
        ),
        p!(
            "trainer.reference_immutability",
            "no trainer path mutates the reference",
            reference_immutability
        ),
        p!(
            "trainer.dataset_growth",
            "k iterations add exactly k times pairs-per-iteration entries",
            dataset_growth
        ),
        p!(
            "trainer.determinism",
            "identical configs give identical logs",
            trainer_determinism
        ),
        p!(
            "trainer.kl_sanity",
            "KL to the reference is 0 at step 0 and never negative",
            kl_sanity
        ),
        p!(
            "metrics.rmse_metric",
            "rmse is symmetric and satisfies the triangle inequality",
            rmse_metric
        ),
        p!(
            "metrics.psnr_monotone",
            "psnr strictly decreases along an increasing rmse ladder",
            psnr_monotone
        ),
        p!("metrics.ssim_identity", "ssim(a, a) = 1", ssim_identity),
        p!(
            "metrics.entropy_permutation",
            "entropy_1d ignores pixel order and stays below log2(bins)",
            entropy_permutation
        ),
    ]
}

/// Checks every registered property (or only those whose id starts with
/// `filter`).
pub fn run(mutation: Option<Mutation>, filter: Option<&str>) -> ConformanceReport {
    let outcomes = registry()
        .iter()
        .filter(|p| filter.is_none_or(|f| p.id.starts_with(f)))
        .map(|p| p.check(mutation))
        .collect();
    ConformanceReport {
        schema: REPORT_SCHEMA.to_string(),
        mutation,
        outcomes,
    }
}

// ---- fixtures ----

const DIM: usize = 2;
const COND: usize = 1;

fn small_models(t_max: usize, rng: &mut RngState) -> (Denoiser, Denoiser) {
    let reference = Denoiser::with_variance_head(DIM, COND, t_max, Architecture { width: 8, depth: 2 }, rng);
    let mut policy = reference.clone();
    for p in policy.params_mut() {
        *p += 0.05 * rng.standard_normal();
    }
    (policy, reference)
}

/// Unit-scale states with zero-noise records, so every step replays.
fn unit_chain(sched: &DiffusionSchedule, c: &[f64], rng: &mut RngState) -> Trajectory {
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

fn chain_pair(sched: &DiffusionSchedule, rng: &mut RngState) -> TrajectoryPair {
    let c = rng.gaussian(COND);
    TrajectoryPair::new(unit_chain(sched, &c, rng), unit_chain(sched, &c, rng)).expect("same condition")
}

fn noise_batch(n: usize, rng: &mut RngState) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| PreferencePair {
            c: rng.gaussian(COND),
            x_w: rng.gaussian(DIM),
            x_l: rng.gaussian(DIM),
            confidence: 1.0,
        })
        .collect()
}

fn schedule(t: usize) -> DiffusionSchedule {
    DiffusionSchedule::make(t, "linear").expect("valid schedule")
}

/// The first self-entropy noise form, with the optional scaling defect.
fn form_a(gamma: f64, mutation: Option<Mutation>) -> NoiseForm {
    match mutation {
        Some(Mutation::GammaScaling) => NoiseForm {
            policy_scale: (1.0 + gamma).powi(2),
            ref_scale: 1.0,
        },
        None => NoiseForm::see_a(gamma),
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_policy(n: usize, floor: f64, rng: &mut RngState) -> DiscretePolicy {
    let w: Vec<f64> = (0..n).map(|_| floor + rng.uniform()).collect();
    DiscretePolicy::from_weights(&w).expect("positive weights")
}

fn random_image(w: usize, h: usize, rng: &mut RngState) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.uniform()).collect()).expect("pixels in range")
}

fn shannon(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

// ---- numerics ----

fn numerics_determinism(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(6);
    let run = || -> Result<(Vec<Vec<f64>>, f64), String> {
        let mut rng = RngState::new(41);
        let (policy, reference) = small_models(6, &mut rng);
        let traj = sample_trajectory(&sched, &policy, &[0.2], &mut rng).map_err(err)?;
        let batch = noise_batch(4, &mut rng);
        let draws = draw_noise(&batch, &sched, &mut rng);
        let (loss, _) =
            noise_loss_with_draws(NoiseForm::BASE, &batch, &draws, &sched, &policy, &reference, 0.1).map_err(err)?;
        Ok((traj.states, loss))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0 == b.0 && a.1.to_bits() == b.1.to_bits(), || {
        "repeated runs differ".into()
    })?;
    Ok("two replays identical".into())
}

/// Every trainer-facing loss, as a closure of the policy.
type LossFn<'a> = Box<dyn Fn(&Denoiser) -> crate::Result<(f64, Gradients)> + 'a>;

fn gradient_fidelity(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(4);
    let mut rng = RngState::new(42);
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for _ in 0..100 {
        let (mut policy, reference) = small_models(4, &mut rng);
        // keep the variance head clear of its cap, where the loss has a kink
        let last = policy.num_params() - 1;
        policy.params_mut()[last] = -0.05;
        let pair = chain_pair(&sched, &mut rng);
        let batch = noise_batch(2, &mut rng);
        let draws = draw_noise(&batch, &sched, &mut rng);
        let k = 1 + rng.below(4);
        let (beta, gamma) = (0.1 + rng.uniform(), 3.0 * rng.uniform());
        let x_t = rng.gaussian(DIM);
        let sp = StepPair::shared_state(&pair.winner.condition, k, &x_t, &rng.gaussian(DIM), &rng.gaussian(DIM));
        let losses: Vec<(&str, LossFn)> = vec![
            (
                "step",
                Box::new(|m: &Denoiser| d3po_step_loss(&pair, &sched, m, &reference, k, beta, gamma)),
            ),
            (
                "bound",
                Box::new(|m: &Denoiser| stepwise_bound_loss(&pair, &sched, m, &reference, k, beta)),
            ),
            (
                "chain",
                Box::new(|m: &Denoiser| full_chain_loss(&pair, &sched, m, &reference, beta)),
            ),
            (
                "shared",
                Box::new(|m: &Denoiser| shared_state_step_loss(&sp, &sched, m, &reference, beta, gamma)),
            ),
            (
                "noise",
                Box::new(|m: &Denoiser| {
                    noise_loss_with_draws(NoiseForm::BASE, &batch, &draws, &sched, m, &reference, beta)
                }),
            ),
            (
                "noise-a",
                Box::new(|m: &Denoiser| {
                    noise_loss_with_draws(NoiseForm::see_a(gamma), &batch, &draws, &sched, m, &reference, beta)
                }),
            ),
            (
                "noise-b",
                Box::new(|m: &Denoiser| {
                    noise_loss_with_draws(NoiseForm::see_b(gamma), &batch, &draws, &sched, m, &reference, beta)
                }),
            ),
        ];
        for (name, f) in &losses {
            let (_, g) = f(&policy).map_err(err)?;
            let report = grad_check(
                |p: &[f64]| f(&policy.with_params(p)).map(|r| r.0).unwrap_or(f64::NAN),
                policy.params(),
                g.values(),
                1e-4,
            );
            worst = worst.max(report.max_rel_error);
            checks += 1;
            ensure(report.passed, || format!("{name}: {report:?}"))?;
        }
    }
    Ok(format!("{checks} gradient checks, worst relative error {worst:.2e}"))
}

fn numerics_purity(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(43);
    let (policy, _) = small_models(5, &mut rng);
    let before = policy.checksum();
    let x = rng.gaussian(DIM);
    let first = policy.forward(&x, 3, &[0.1]).map_err(err)?;
    let up = rng.gaussian(DIM);
    let g1 = policy.backward(&x, 3, &[0.1], &up).map_err(err)?;
    let g2 = policy.backward(&x, 3, &[0.1], &up).map_err(err)?;
    let second = policy.forward(&x, 3, &[0.1]).map_err(err)?;
    ensure(first == second && g1 == g2 && before == policy.checksum(), || {
        "repeated calls disagree or parameters changed".into()
    })?;
    Ok("forward and backward repeat exactly".into())
}

// ---- diffusion ----

fn marginal_consistency(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(10);
    let mut rng = RngState::new(44);
    let x0 = [0.7, -1.2];
    let n = 10_000;
    for t in [1, 4, 10] {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for d in 0..DIM {
            let draws: Vec<f64> = (0..n)
                .map(|_| forward_noise(&sched, &x0, t, &rng.gaussian(DIM)).map(|v| v[d]))
                .collect::<crate::Result<_>>()
                .map_err(err)?;
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = s / (n as f64).sqrt();
            let se_var = s * s * (2.0 / (n - 1) as f64).sqrt();
            ensure((mean - a * x0[d]).abs() < 3.0 * se_mean, || {
                format!("t={t}: mean {mean} vs {}", a * x0[d])
            })?;
            ensure((var - s * s).abs() < 3.0 * se_var, || {
                format!("t={t}: variance {var} vs {}", s * s)
            })?;
        }
    }
    Ok("mean and variance within 3 standard errors at t = 1, 4, 10".into())
}

fn record_replay(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(8);
    let mut rng = RngState::new(45);
    let (policy, _) = small_models(8, &mut rng);
    for _ in 0..10 {
        let traj = sample_trajectory(&sched, &policy, &[0.3], &mut rng).map_err(err)?;
        ensure(traj.replays_exactly(), || "states differ from replayed records".into())?;
        let lp = traj.logprobs(&sched, &policy).map_err(err)?;
        let json = traj.to_json().map_err(err)?;
        let back = Trajectory::from_json(&json).map_err(err)?;
        let again = back.logprobs(&sched, &policy).map_err(err)?;
        ensure(lp == again, || "log-densities changed after a JSON round trip".into())?;
        for t in 1..=8 {
            let direct = step_logprob(
                &sched,
                &policy,
                &traj.states[t],
                &traj.states[t - 1],
                t,
                &traj.condition,
            )
            .map_err(err)?;
            ensure(direct == lp[t - 1], || format!("step {t} re-evaluates differently"))?;
        }
    }
    Ok("10 trajectories replay exactly".into())
}

fn pretrain_coverage(_: Option<Mutation>) -> Result<String, String> {
    let sched = crate::trainer::desk_schedule();
    let (model, report) = crate::trainer::pretrain_reference(
        DatasetKind::Mixture4,
        &sched,
        crate::numerics::Architecture::default(),
        &crate::diffusion::PretrainConfig::default(),
        crate::trainer::DESK_REFERENCE_SEED,
    )
    .map_err(err)?;
    let trajs = crate::diffusion::sample_many(&sched, &model, &[Vec::new()], 1000, &RngState::new(46)).map_err(err)?;
    let samples: Vec<Vec<f64>> = trajs.iter().map(|t| t.sample().to_vec()).collect();
    let centers = crate::data::GaussianMixture::four_modes().centers;
    let cov = crate::metrics::mode_coverage(&samples, &centers).map_err(err)?;
    ensure(cov.iter().all(|&c| c >= 0.05), || format!("coverage {cov:?}"))?;
    Ok(format!(
        "coverage {cov:.3?}, loss {:.3} -> {:.3}",
        report.initial_loss, report.final_loss
    ))
}

// ---- preference ----

fn bt_swap(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(47);
    for _ in 0..1000 {
        let (a, b) = (5.0 * rng.standard_normal(), 5.0 * rng.standard_normal());
        ensure(bt_probability(b, a) == 1.0 - bt_probability(a, b), || {
            format!("swap fails at ({a}, {b})")
        })?;
    }
    Ok("1000 random pairs".into())
}

fn argmax_invariance(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(48);
    let mut dummy = RngState::new(0);
    for _ in 0..20 {
        let (scale, shift, pow) = (
            0.1 + 3.0 * rng.uniform(),
            rng.standard_normal(),
            1 + 2 * rng.below(3) as i32,
        );
        let map = |r: f64| scale * r.powi(pow) + shift + r.atan();
        for _ in 0..50 {
            let (ra, rb) = (rng.standard_normal(), rng.standard_normal());
            let (xa, xb) = (rng.gaussian(DIM), rng.gaussian(DIM));
            let plain = first_wins(ra, rb, &xa, &xb, LabelMode::Deterministic, &mut dummy);
            let mapped = first_wins(map(ra), map(rb), &xa, &xb, LabelMode::Deterministic, &mut dummy);
            ensure(plain == mapped, || format!("label flips for rewards ({ra}, {rb})"))?;
        }
    }
    Ok("20 monotone maps x 50 pairs".into())
}

fn bt_shift_invariance(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(49);
    for _ in 0..20 {
        let rm = RewardModel::new(DIM, COND, None, Architecture { width: 8, depth: 2 }, &mut rng);
        let pairs = noise_batch(8, &mut rng);
        let (base, _) = bt_loss(&rm, &pairs).map_err(err)?;
        let mut shifted = rm.clone();
        let last = shifted.num_params() - 1;
        shifted.params_mut()[last] += 3.0 * rng.standard_normal();
        let (moved, _) = bt_loss(&shifted, &pairs).map_err(err)?;
        ensure((base - moved).abs() <= 1e-12, || format!("{base} vs {moved}"))?;
    }
    Ok("20 models, shifted output bias".into())
}

// ---- objectives ----

fn gamma_zero_reduction(mutation: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(5);
    let mut rng = RngState::new(50);
    let (policy, reference) = small_models(5, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pair = chain_pair(&sched, &mut rng);
        let k = 1 + rng.below(5);
        let beta = 0.05 + rng.uniform();
        let see = LossConfig::new(Variant::SeeStep, beta, 0.0, 5).map_err(err)?;
        let base = see.base_equivalent().ok_or("see-step at gamma 0 has no base form")?;
        let (a, _) = d3po_step_loss(&pair, &sched, &policy, &reference, k, see.beta, see.gamma).map_err(err)?;
        let (b, _) = d3po_step_loss(&pair, &sched, &policy, &reference, k, base.beta, base.gamma).map_err(err)?;
        worst = worst.max((a - b).abs());
        let batch = noise_batch(3, &mut rng);
        let draws = draw_noise(&batch, &sched, &mut rng);
        let plain = noise_loss_with_draws(NoiseForm::BASE, &batch, &draws, &sched, &policy, &reference, beta)
            .map_err(err)?
            .0;
        for form in [form_a(0.0, mutation), NoiseForm::see_b(0.0)] {
            let l = noise_loss_with_draws(form, &batch, &draws, &sched, &policy, &reference, beta)
                .map_err(err)?
                .0;
            worst = worst.max((l - plain).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("worst gap {worst:e}"))?;
    Ok(format!("100 instances per variant, worst gap {worst:.1e}"))
}

fn form_equivalence(mutation: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(10);
    let mut rng = RngState::new(51);
    let (policy, reference) = small_models(10, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let batch = noise_batch(3, &mut rng);
        let draws = draw_noise(&batch, &sched, &mut rng);
        let beta = 0.01 + 0.2 * rng.uniform();
        for gamma in [0.5, 1.0, 3.0, 5.0] {
            let a = noise_loss_with_draws(
                form_a(gamma, mutation),
                &batch,
                &draws,
                &sched,
                &policy,
                &reference,
                beta,
            )
            .map_err(err)?
            .0;
            let b = noise_loss_with_draws(
                NoiseForm::see_b(gamma),
                &batch,
                &draws,
                &sched,
                &policy,
                &reference,
                beta * (1.0 + gamma),
            )
            .map_err(err)?
            .0;
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("worst gap {worst:e}"))?;
    Ok(format!("400 instances, worst gap {worst:.1e}"))
}

fn flattening_equivalence(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(5);
    let mut rng = RngState::new(52);
    let (policy, reference) = small_models(5, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pair = chain_pair(&sched, &mut rng);
        let k = 1 + rng.below(5);
        let (beta, gamma) = (0.05 + rng.uniform(), -0.9 + 6.0 * rng.uniform());
        let cache = ReferenceCache::compute(&pair, &sched, &reference).map_err(err)?;
        let (see, _) = d3po_step_loss_cached(&pair, &cache, &sched, &policy, k, beta, gamma).map_err(err)?;
        let flat = ReferenceCache {
            winner: cache.winner.iter().map(|v| v / (1.0 + gamma)).collect(),
            loser: cache.loser.iter().map(|v| v / (1.0 + gamma)).collect(),
        };
        let (base, _) =
            d3po_step_loss_cached(&pair, &flat, &sched, &policy, k, beta * (1.0 + gamma), 0.0).map_err(err)?;
        worst = worst.max((see - base).abs());
    }
    ensure(worst <= 1e-12, || format!("worst gap {worst:e}"))?;
    Ok(format!("100 instances, worst gap {worst:.1e}"))
}

fn closed_form_optimality(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(53);
    for _ in 0..20 {
        let p = random_policy(8, 0.02, &mut rng);
        let r: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let beta = 0.5 + rng.uniform();
        for gamma in [0.0, 1.0, 3.0] {
            let pi = closed_form_policy(&p, &r, beta, gamma).map_err(err)?;
            let best = regularized_objective(pi.probs(), p.probs(), &r, beta, gamma);
            let grid = grid_optimum(p.probs(), &r, beta, gamma, 1000);
            let value = regularized_objective(&grid, p.probs(), &r, beta, gamma);
            ensure(best >= value, || {
                format!("grid point scores {value} above closed form {best}")
            })?;
        }
    }
    Ok("20 instances x 3 gammas against the best 1e-3 grid point".into())
}

/// Best point of the simplex grid with `units` cells per unit mass. The
/// objective is a sum of concave per-action terms, so single-cell exchanges
/// that improve it reach the grid optimum.
fn grid_optimum(p: &[f64], r: &[f64], beta: f64, gamma: f64, units: usize) -> Vec<f64> {
    let n = p.len();
    let h = 1.0 / units as f64;
    let term = |i: usize, k: usize| {
        let x = k as f64 * h;
        if k == 0 {
            0.0
        } else {
            x * r[i] - beta * x * (x / p[i]).ln() - beta * gamma * x * x.ln()
        }
    };
    let mut alloc = vec![units / n; n];
    alloc[0] += units - alloc.iter().sum::<usize>();
    let mut step = units / n;
    while step >= 1 {
        loop {
            let mut best = (0.0, 0, 0);
            for give in (0..n).filter(|&g| alloc[g] >= step) {
                let loss = term(give, alloc[give]) - term(give, alloc[give] - step);
                for take in (0..n).filter(|&t| t != give) {
                    let gain = term(take, alloc[take] + step) - term(take, alloc[take]);
                    if gain - loss > best.0 {
                        best = (gain - loss, give, take);
                    }
                }
            }
            if best.0 <= 0.0 {
                break;
            }
            alloc[best.1] -= step;
            alloc[best.2] += step;
        }
        step /= 2;
    }
    alloc.iter().map(|&k| k as f64 * h).collect()
}

fn entropy_monotonicity(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(54);
    for _ in 0..100 {
        let p = random_policy(6, 1e-3, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for gamma in [0.0, 0.5, 1.0, 3.0, 5.0, 10.0] {
            let h = shannon(flatten_distribution(&p, gamma).map_err(err)?.probs());
            ensure(h >= prev - 1e-12, || format!("entropy drops to {h} at gamma {gamma}"))?;
            prev = h;
        }
    }
    Ok("100 distributions over 6 gammas".into())
}

fn permutation_invariance(_: Option<Mutation>) -> Result<String, String> {
    let sched = schedule(6);
    let mut rng = RngState::new(55);
    let (policy, reference) = small_models(6, &mut rng);
    for _ in 0..20 {
        let batch = noise_batch(7, &mut rng);
        let draws = draw_noise(&batch, &sched, &mut rng);
        let mut order: Vec<usize> = (0..7).collect();
        rng.shuffle(&mut order);
        let pb: Vec<_> = order.iter().map(|&i| batch[i].clone()).collect();
        let pd: Vec<_> = order.iter().map(|&i| draws[i].clone()).collect();
        for form in [NoiseForm::BASE, NoiseForm::see_a(2.0), NoiseForm::see_b(2.0)] {
            let a = noise_loss_with_draws(form, &batch, &draws, &sched, &policy, &reference, 0.1)
                .map_err(err)?
                .0;
            let b = noise_loss_with_draws(form, &pb, &pd, &sched, &policy, &reference, 0.1)
                .map_err(err)?
                .0;
            ensure(a == b, || format!("{a} vs {b} after permuting"))?;
        }
        let rm = RewardModel::new(DIM, COND, None, Architecture { width: 8, depth: 2 }, &mut rng);
        ensure(
            bt_loss(&rm, &batch).map_err(err)?.0 == bt_loss(&rm, &pb).map_err(err)?.0,
            || "bt_loss depends on order".into(),
        )?;
        let p = random_policy(5, 0.05, &mut rng);
        let q = random_policy(5, 0.05, &mut rng);
        let pairs: Vec<(usize, usize)> = (0..6).map(|_| (rng.below(5), rng.below(5))).collect();
        let mut shuffled = pairs.clone();
        rng.shuffle(&mut shuffled);
        let a = crate::objectives::dpo_bandit_loss(&p, &q, &pairs, 0.4).map_err(err)?;
        let b = crate::objectives::dpo_bandit_loss(&p, &q, &shuffled, 0.4).map_err(err)?;
        ensure(a == b, || "bandit loss depends on order".into())?;
    }
    Ok("noise, bandit and reward-model losses over 20 shuffles".into())
}

fn margin_monotonicity(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(56);
    for _ in 0..100 {
        let (beta, gamma) = (0.05 + rng.uniform(), 4.0 * rng.uniform());
        let base = StepLogProbs {
            policy_w: rng.standard_normal(),
            policy_l: rng.standard_normal(),
            ref_w: rng.standard_normal(),
            ref_l: rng.standard_normal(),
        };
        let mut prev = f64::INFINITY;
        for gap in [-1.0, -0.3, 0.0, 0.3, 1.0] {
            let lp = StepLogProbs {
                policy_w: base.policy_w + gap,
                ..base
            };
            let l = step_loss_from_logprobs(&lp, beta, gamma);
            ensure(l < prev, || format!("loss {l} not below {prev} at gap {gap}"))?;
            prev = l;
        }
    }
    Ok("100 random step instances over a 5-point gap ladder".into())
}

// ---- trainer ----

fn tiny_run(seed: u64, iterations: usize) -> crate::Result<(RunConfig, DiffusionSchedule, Denoiser)> {
    let sched = schedule(5);
    let mut rng = RngState::new(57);
    let reference = Denoiser::with_variance_head(2, 0, 5, Architecture { width: 16, depth: 2 }, &mut rng);
    let loss = LossConfig::new(Variant::SeeStep, 0.5, 1.0, 5)?;
    let mut config = RunConfig::mixture_defaults(loss);
    config.iterations = iterations;
    config.pairs_per_iteration = 4;
    config.batch_size = 4;
    config.eval_every = 1;
    config.eval_samples = 16;
    config.seed = seed;
    config.optimizer.lr = 1e-2;
    Ok((config, sched, reference))
}

fn reference_immutability(_: Option<Mutation>) -> Result<String, String> {
    let (config, sched, reference) = tiny_run(1, 3).map_err(err)?;
    let before = reference.checksum();
    let mut trainer = Trainer::new(config, sched, reference).map_err(err)?;
    trainer.run(None, None).map_err(err)?;
    ensure(trainer.reference().checksum() == before, || {
        "reference checksum changed".into()
    })?;
    ensure(trainer.state().policy.checksum() != before, || {
        "policy never moved".into()
    })?;
    Ok("checksum unchanged after 3 iterations".into())
}

fn dataset_growth(_: Option<Mutation>) -> Result<String, String> {
    let (config, sched, reference) = tiny_run(2, 4).map_err(err)?;
    let per = config.pairs_per_iteration;
    let mut trainer = Trainer::new(config, sched, reference).map_err(err)?;
    let initial = trainer.state().dataset.len();
    for k in 1..=4 {
        trainer.run_online_iteration().map_err(err)?;
        let len = trainer.state().dataset.len();
        ensure(len == initial + k * per, || {
            format!("after {k} iterations: {len} entries")
        })?;
    }
    Ok(format!("{initial} + k x {per} entries for k = 1..4"))
}

fn trainer_determinism(_: Option<Mutation>) -> Result<String, String> {
    let run = || -> crate::Result<String> {
        let (config, sched, reference) = tiny_run(3, 3)?;
        let mut trainer = Trainer::new(config, sched, reference)?;
        trainer.run(None, None)?;
        trainer.log().to_json()
    };
    ensure(run().map_err(err)? == run().map_err(err)?, || "logs differ".into())?;
    Ok("two runs give identical JSON logs".into())
}

fn kl_sanity(_: Option<Mutation>) -> Result<String, String> {
    let (config, sched, reference) = tiny_run(4, 3).map_err(err)?;
    let mut trainer = Trainer::new(config, sched, reference).map_err(err)?;
    trainer.run(None, None).map_err(err)?;
    let rows = &trainer.log().rows;
    ensure(rows[0].kl == 0.0, || format!("KL at step 0 is {}", rows[0].kl))?;
    ensure(rows.iter().all(|r| r.kl >= 0.0), || "negative KL".into())?;
    Ok(format!(
        "{} rows, final KL {:.3e}",
        rows.len(),
        rows.last().map_or(0.0, |r| r.kl)
    ))
}

// ---- metrics ----

fn rmse_metric(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(58);
    for _ in 0..100 {
        let (a, b, c) = (
            random_image(8, 8, &mut rng),
            random_image(8, 8, &mut rng),
            random_image(8, 8, &mut rng),
        );
        let ab = rmse(&a, &b).map_err(err)?;
        let ba = rmse(&b, &a).map_err(err)?;
        let (bc, ac) = (rmse(&b, &c).map_err(err)?, rmse(&a, &c).map_err(err)?);
        ensure((ab - ba).abs() <= 1e-12, || "rmse is not symmetric".into())?;
        ensure(ac <= ab + bc + 1e-12, || {
            format!("triangle inequality fails: {ac} > {ab} + {bc}")
        })?;
    }
    Ok("100 random triples".into())
}

fn psnr_monotone(_: Option<Mutation>) -> Result<String, String> {
    let base = GrayImage::constant(8, 8, 0.0).map_err(err)?;
    let mut prev = f64::INFINITY;
    for k in 1..=20 {
        let other = GrayImage::constant(8, 8, k as f64 * 0.05).map_err(err)?;
        let p = psnr(&base, &other, 1.0).map_err(err)?;
        ensure(p < prev, || format!("psnr {p} not below {prev} at rung {k}"))?;
        prev = p;
    }
    Ok("20-rung rmse ladder".into())
}

fn ssim_identity(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(59);
    for _ in 0..50 {
        let a = random_image(8 + rng.below(8), 8 + rng.below(8), &mut rng);
        let s = ssim(&a, &a).map_err(err)?;
        ensure(s == 1.0, || format!("ssim(a, a) = {s}"))?;
    }
    Ok("50 random images".into())
}

fn entropy_permutation(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = RngState::new(60);
    for _ in 0..50 {
        let a = random_image(16, 16, &mut rng);
        let mut pixels = a.pixels().to_vec();
        rng.shuffle(&mut pixels);
        let b = GrayImage::new(16, 16, pixels).map_err(err)?;
        let (ea, eb) = (entropy_1d(&a, 256).map_err(err)?, entropy_1d(&b, 256).map_err(err)?);
        ensure(ea == eb, || format!("{ea} vs {eb} after permuting"))?;
        ensure(ea <= 8.0, || format!("entropy {ea} above 8 bits"))?;
    }
    Ok("50 random images".into())
}
