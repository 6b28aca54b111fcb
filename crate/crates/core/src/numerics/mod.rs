//! Deterministic numerical building blocks.

pub mod denoiser;
pub mod gradcheck;
pub mod mlp;
pub mod nonfinite;
pub mod optim;
pub mod rng;

pub use denoiser::{time_embedding, Architecture, Denoiser, NoisePredictor, LOG_VAR_BOUND, TIME_FEATURES};
pub use gradcheck::{grad_check, grad_check_entries, relative_error, GradCheckReport, FD_STEP};
pub use mlp::{ForwardCache, Gradients, Mlp};
pub use optim::{Adam, AdamConfig};
pub use rng::{RngSnapshot, RngState};

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)`, computed as `softplus(-z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `log sum exp` of a slice; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean that does not depend on the order of `values`: the terms are summed
/// in sorted order, so permuting a batch leaves the result bit-identical.
pub fn order_free_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / values.len() as f64
}

pub fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
