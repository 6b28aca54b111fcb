use prefdiff::data::{Dataset, GaussianMixture};
use prefdiff::diffusion::{
    forward_noise, gaussian_logprob, posterior_mean, posterior_mean_with_grad, pretrain, reverse_step_with_noise,
    sample_many, step_logprob, step_logprob_grad, DiffusionSchedule, PretrainConfig, X0_CLIP,
};
use prefdiff::metrics::mode_coverage;
use prefdiff::numerics::{grad_check_entries, Adam, AdamConfig, Architecture, Denoiser, RngState};
use prefdiff::objectives::gaussian_kl;

#[test]
fn forward_marginals_match_schedule() {
    let sched = DiffusionSchedule::make(50, "linear").unwrap();
    let x0 = [1.5, -0.5];
    let n = 10_000;
    for t in [1, 10, 25, 50] {
        let mut rng = RngState::new(t as u64);
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| forward_noise(&sched, &x0, t, &rng.gaussian(2)).unwrap())
            .collect();
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for k in 0..2 {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = s / (n as f64).sqrt();
            let se_var = s * s * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - a * x0[k]).abs() < 3.0 * se_mean, "t={t} mean {mean}");
            assert!((var - s * s).abs() < 3.0 * se_var, "t={t} var {var}");
        }
    }
}

#[test]
fn forward_noise_fixtures() {
    let sched = DiffusionSchedule::make(10, "linear").unwrap();
    assert_eq!(
        forward_noise(&sched, &[0.3, 0.4], 0, &[9.0, 9.0]).unwrap(),
        vec![0.3, 0.4]
    );
    assert!(forward_noise(&sched, &[0.3], 11, &[0.0]).is_err());
}

#[test]
fn overfit_denoiser_pulls_mean_toward_its_point() {
    let sched = DiffusionSchedule::make(10, "linear").unwrap();
    let mut rng = RngState::new(5);
    let mut model = Denoiser::new(2, 0, 10, Architecture { width: 32, depth: 2 }, &mut rng);
    let target = prefdiff::data::DataPoint {
        x: vec![0.8, -0.6],
        c: vec![],
    };
    let mut adam = Adam::new(AdamConfig::with_lr(3e-3), model.num_params());
    for _ in 0..1500 {
        let batch = vec![target.clone(); 32];
        let (_, grad) = prefdiff::diffusion::dm_pretrain_loss(&sched, &model, &batch, &mut rng).unwrap();
        adam.step(model.params_mut(), &grad).unwrap();
    }
    let mut closer = 0;
    for trial in 0..20 {
        let eps = rng.gaussian(2);
        let t = 1 + trial % 3;
        let x_t = forward_noise(&sched, &target.x, t, &eps).unwrap();
        let (mean, _) = reverse_step_with_noise(&sched, &model, &x_t, t, &[], vec![0.0; 2]).unwrap();
        let d = |v: &[f64]| prefdiff::numerics::squared_distance(v, &target.x);
        if d(&mean) <= d(&x_t) {
            closer += 1;
        }
    }
    assert_eq!(closer, 20);
}

fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dist = |x: &Vec<f64>, y: &Vec<f64>| prefdiff::numerics::squared_distance(x, y).sqrt();
    let cross = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        p.iter().map(|x| q.iter().map(|y| dist(x, y)).sum::<f64>()).sum::<f64>() / (p.len() * q.len()) as f64
    };
    2.0 * cross(a, b) - cross(a, a) - cross(b, b)
}

#[test]
fn pretraining_covers_all_modes() {
    let sched = DiffusionSchedule::make(50, "linear").unwrap();
    let mix = GaussianMixture::four_modes();
    let mut rng = RngState::new(2024);
    let mut model = Denoiser::new(2, 0, 50, Architecture::default(), &mut rng);
    let untrained = model.clone();
    let report = pretrain(&sched, &mut model, &mix, &PretrainConfig::default(), &mut rng).unwrap();
    assert!(report.final_loss < report.initial_loss);

    let samples: Vec<Vec<f64>> = sample_many(&sched, &model, &[vec![]], 1000, &rng.split(1))
        .unwrap()
        .into_iter()
        .map(|t| t.states[0].clone())
        .collect();
    let coverage = mode_coverage(&samples, &mix.centers).unwrap();
    assert!(coverage.iter().all(|&c| c >= 0.05), "{coverage:?}");

    let target: Vec<Vec<f64>> = (0..300).map(|_| mix.sample(&mut rng).x).collect();
    let raw: Vec<Vec<f64>> = sample_many(&sched, &untrained, &[vec![]], 300, &rng.split(2))
        .unwrap()
        .into_iter()
        .map(|t| t.states[0].clone())
        .collect();
    assert!(energy_distance(&raw, &target) > energy_distance(&samples[..300], &target));
}

/// Posterior mean written through the denoised estimate:
/// `sqrt(abar_{t-1}) beta_t / (1 - abar_t) x0 + sqrt(a_t) (1 - abar_{t-1}) / (1 - abar_t) x_t`.
fn x0_form_mean(sched: &DiffusionSchedule, x_t: f64, t: usize, x0: f64) -> f64 {
    let abar = |s: usize| sched.alpha(s).powi(2);
    let beta = 1.0 - abar(t) / abar(t - 1);
    let c0 = abar(t - 1).sqrt() * beta / (1.0 - abar(t));
    let ct = (abar(t) / abar(t - 1)).sqrt() * (1.0 - abar(t - 1)) / (1.0 - abar(t));
    c0 * x0 + ct * x_t
}

#[test]
fn posterior_mean_matches_denoised_parameterization_and_clips() {
    let sched = DiffusionSchedule::make(10, "linear").unwrap();
    let mut rng = RngState::new(21);
    for t in 1..=10 {
        for _ in 0..50 {
            let x_t = rng.gaussian(2);
            let eps: Vec<f64> = (0..2).map(|_| 20.0 * rng.standard_normal()).collect();
            let (mean, slopes) = posterior_mean_with_grad(&sched, &x_t, t, &eps);
            assert_eq!(mean, posterior_mean(&sched, &x_t, t, &eps));
            for k in 0..2 {
                let x0 = (x_t[k] - sched.sigma(t) * eps[k]) / sched.alpha(t);
                let clipped = x0.clamp(-X0_CLIP, X0_CLIP);
                let expected = x0_form_mean(&sched, x_t[k], t, clipped);
                assert!(
                    (mean[k] - expected).abs() <= 1e-9 * (1.0 + expected.abs()),
                    "t={t}: {} vs {expected}",
                    mean[k]
                );
                assert_eq!(slopes[k] == 0.0, x0.abs() > X0_CLIP);
            }
        }
    }
}

#[test]
fn step_variance_never_exceeds_the_destination_noise_level() {
    let sched = DiffusionSchedule::make(20, "linear").unwrap();
    assert_eq!(sched.log_variance_cap(1), 0.0);
    assert_eq!(sched.step_variance(1, 0.7), (sched.reverse_variance(1), true));
    for t in 2..=20 {
        let s2 = sched.sigma(t - 1).powi(2);
        let (var, capped) = sched.step_variance(t, 50.0);
        assert!(capped && (var - s2).abs() <= 1e-12 * s2, "t={t}: {var} vs {s2}");
        let (low, capped) = sched.step_variance(t, -0.3);
        assert!(!capped);
        assert!((low - sched.reverse_variance(t) * (-0.3f64).exp()).abs() <= 1e-15);
    }
}

#[test]
fn variance_head_gradient_vanishes_only_under_the_cap() {
    let sched = DiffusionSchedule::make(6, "linear").unwrap();
    let mut rng = RngState::new(22);
    let mut model = Denoiser::with_variance_head(2, 1, 6, Architecture { width: 8, depth: 2 }, &mut rng);
    let head_bias = model.num_params() - 1;
    let (x_t, x_prev, c) = (rng.gaussian(2), rng.gaussian(2), [0.4]);
    let logp = |m: &Denoiser| step_logprob(&sched, m, &x_t, &x_prev, 1, &c).unwrap();

    for (bias, capped) in [(-0.3, false), (0.3, true)] {
        model.params_mut()[head_bias] = bias;
        let mut grad = model.zero_grad();
        step_logprob_grad(&sched, &model, &x_t, &x_prev, 1, &c, 1.0, &mut grad).unwrap();
        assert_eq!(grad.values()[head_bias] == 0.0, capped);
        let report = grad_check_entries(
            |p: &[f64]| logp(&model.with_params(p)),
            model.params(),
            grad.values(),
            1e-4,
            &[head_bias],
        );
        assert!(report.passed, "bias {bias}: {report:?}");
    }
}

#[test]
fn gaussian_kl_matches_closed_form_and_monte_carlo() {
    let expected = 0.5 * (0.5 - 1.0 + 2.0f64.ln());
    assert!((gaussian_kl(&[0.0], 1.0, &[0.0], 2.0) - expected).abs() < 1e-15);
    assert_eq!(gaussian_kl(&[0.3, -1.0], 0.7, &[0.3, -1.0], 0.7), 0.0);

    let (mp, vp, mq, vq) = ([0.5, -0.2], 0.6f64, [-0.1, 0.4], 1.3);
    let mut rng = RngState::new(23);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let x: Vec<f64> = rng
                .gaussian(2)
                .iter()
                .zip(&mp)
                .map(|(z, m)| m + vp.sqrt() * z)
                .collect();
            gaussian_logprob(&x, &mp, vp).unwrap() - gaussian_logprob(&x, &mq, vq).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let se = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    let kl = gaussian_kl(&mp, vp, &mq, vq);
    assert!((mean - kl).abs() < 4.0 * se, "{mean} vs {kl} (se {se})");
}
