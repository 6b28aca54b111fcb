//! Closed forms on a finite action set.

use serde::{Deserialize, Serialize};

use crate::numerics::{log_sum_exp, neg_log_sigmoid, order_free_mean, sigmoid};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePolicy {
    probs: Vec<f64>,
    #[serde(default)]
    condition: usize,
}

impl DiscretePolicy {
    /// Checks non-negativity and that the entries sum to 1 within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs, condition: 0 })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::contract(
                "weights must be non-negative with a positive finite sum",
            ));
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / total).collect(),
            condition: 0,
        })
    }

    /// Softmax of log-weights; `-inf` entries get probability zero.
    pub fn from_log_weights(logw: &[f64]) -> Result<Self> {
        let z = log_sum_exp(logw);
        if !z.is_finite() {
            return Err(Error::contract("log-weights have no finite entry"));
        }
        Ok(Self {
            probs: logw.iter().map(|l| (l - z).exp()).collect(),
            condition: 0,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
            condition: 0,
        }
    }

    pub fn with_condition(mut self, condition: usize) -> Self {
        self.condition = condition;
        self
    }

    pub fn condition(&self) -> usize {
        self.condition
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > -1.0) || !gamma.is_finite() {
        return Err(Error::contract(format!("gamma must be finite and > -1, got {gamma}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `normalize(p^(1/(1+gamma)))`, computed in log space. Zero entries stay zero.
pub fn flatten_distribution(p: &DiscretePolicy, gamma: f64) -> Result<DiscretePolicy> {
    check_gamma(gamma)?;
    if p.probs.iter().all(|&v| v == 0.0) {
        return Err(Error::contract("cannot flatten an all-zero distribution"));
    }
    if gamma == 0.0 {
        return Ok(p.clone());
    }
    let e = 1.0 / (1.0 + gamma);
    let logw: Vec<f64> = p.probs.iter().map(|v| e * v.ln()).collect();
    Ok(DiscretePolicy::from_log_weights(&logw)?.with_condition(p.condition))
}

/// `log sum_a p_ref(a) exp(r(a) / beta)`.
pub fn log_partition_function(p_ref: &DiscretePolicy, rewards: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if rewards.len() != p_ref.len() {
        return Err(Error::contract("reward vector and policy sizes differ"));
    }
    let terms: Vec<f64> = p_ref
        .probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + r / beta)
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn partition_function(p_ref: &DiscretePolicy, rewards: &[f64], beta: f64) -> Result<f64> {
    Ok(log_partition_function(p_ref, rewards, beta)?.exp())
}

/// `normalize(p_ref^(1/(1+gamma)) exp(r / (beta (1+gamma))))`, the maximizer
/// of [`regularized_objective`].
pub fn closed_form_policy(p_ref: &DiscretePolicy, rewards: &[f64], beta: f64, gamma: f64) -> Result<DiscretePolicy> {
    check_beta(beta)?;
    check_gamma(gamma)?;
    if rewards.len() != p_ref.len() {
        return Err(Error::contract("reward vector and policy sizes differ"));
    }
    let k = 1.0 + gamma;
    let logw: Vec<f64> = p_ref
        .probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() / k + r / (beta * k))
        .collect();
    Ok(DiscretePolicy::from_log_weights(&logw)?.with_condition(p_ref.condition))
}

/// `sum pi r - beta KL(pi || p_ref) - beta gamma sum pi log pi`.
pub fn regularized_objective(pi: &[f64], p_ref: &[f64], rewards: &[f64], beta: f64, gamma: f64) -> f64 {
    let mut value = 0.0;
    for ((&p, &q), &r) in pi.iter().zip(p_ref).zip(rewards) {
        value += p * r;
        if p > 0.0 {
            value -= beta * p * (p / q).ln() + beta * gamma * p * p.ln();
        }
    }
    value
}

/// `beta log(p_theta(a) / p_ref(a)) + beta log Z`.
pub fn implied_reward(
    p_theta: &DiscretePolicy,
    p_ref: &DiscretePolicy,
    beta: f64,
    action: usize,
    z: f64,
) -> Result<f64> {
    let (pt, pr) = (p_theta.probs[action], p_ref.probs[action]);
    if !(pt > 0.0 && pr > 0.0) {
        return Err(Error::contract(format!("action {action} has zero probability")));
    }
    Ok(beta * (pt / pr).ln() + beta * z.ln())
}

fn log_ratio(p_theta: &DiscretePolicy, p_ref: &DiscretePolicy, a: usize) -> Result<f64> {
    let (pt, pr) = match (p_theta.probs.get(a), p_ref.probs.get(a)) {
        (Some(&pt), Some(&pr)) => (pt, pr),
        _ => return Err(Error::contract(format!("action {a} out of range"))),
    };
    if !(pt > 0.0 && pr > 0.0) {
        return Err(Error::contract(format!("action {a} has zero probability")));
    }
    Ok(pt.ln() - pr.ln())
}

/// Mean over `(winner, loser)` action pairs of
/// `-log sigma(beta [log-ratio(w) - log-ratio(l)])`.
pub fn dpo_bandit_loss(
    p_theta: &DiscretePolicy,
    p_ref: &DiscretePolicy,
    pairs: &[(usize, usize)],
    beta: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("no action pairs"));
    }
    let losses = pairs
        .iter()
        .map(|&(w, l)| {
            let z = beta * (log_ratio(p_theta, p_ref, w)? - log_ratio(p_theta, p_ref, l)?);
            Ok(neg_log_sigmoid(z))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(order_free_mean(&losses))
}

/// Step loss of a tabular softmax policy with logits `logits`, including the
/// self-entropy weight. Returns the mean loss and its gradient with respect
/// to the logits.
pub fn see_bandit_loss(
    logits: &[f64],
    log_ref: &[f64],
    pairs: &[(usize, usize)],
    beta: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_gamma(gamma)?;
    if pairs.is_empty() {
        return Err(Error::contract("no action pairs"));
    }
    let lse = log_sum_exp(logits);
    let k = 1.0 + gamma;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut losses = Vec::with_capacity(pairs.len());
    for &(w, l) in pairs {
        let term = |a: usize| (logits[a] - lse) - log_ref[a] / k;
        let z = beta * k * (term(w) - term(l));
        losses.push(neg_log_sigmoid(z));
        let g = -sigmoid(-z) * beta * k / n;
        grad[w] += g;
        grad[l] -= g;
    }
    Ok((order_free_mean(&losses), grad))
}
