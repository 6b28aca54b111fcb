//! The epsilon-prediction network and its input encoding.

use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, Gradients, Mlp};
use super::rng::RngState;
use crate::{Error, Result};

/// Number of sinusoid frequencies in the timestep embedding.
pub const TIME_FREQUENCIES: usize = 4;
/// `(sin, cos)` per frequency plus the raw fraction `t / T`.
pub const TIME_FEATURES: usize = 2 * TIME_FREQUENCIES + 1;

/// Embeds timestep `t` of `total_steps` as `sin/cos(2^k * pi * t / T)` for
/// `k = 0..4` followed by `t / T`.
pub fn time_embedding(t: usize, total_steps: usize) -> [f64; TIME_FEATURES] {
    let s = t as f64 / total_steps as f64;
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..TIME_FREQUENCIES {
        let angle = (1u32 << k) as f64 * std::f64::consts::PI * s;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out[TIME_FEATURES - 1] = s;
    out
}

/// Hidden-layer layout shared by denoisers and reward models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    pub depth: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { width: 64, depth: 3 }
    }
}

impl Architecture {
    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(self.width, self.depth));
        sizes.push(output);
        sizes
    }
}

/// The variance head's output is `LOG_VAR_BOUND * tanh(LOG_VAR_GAIN * raw / LOG_VAR_BOUND)`.
pub const LOG_VAR_BOUND: f64 = 2.0;
pub const LOG_VAR_GAIN: f64 = 10.0;

fn bounded_log_var(raw: f64) -> f64 {
    LOG_VAR_BOUND * (LOG_VAR_GAIN * raw / LOG_VAR_BOUND).tanh()
}

/// Anything that predicts the injected noise from `(x_t, t, c)`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>>;

    /// The noise prediction and the log multiplier `v` applied to the
    /// schedule's reverse variance (`0` for a fixed-variance model).
    fn predict_step(&self, x: &[f64], t: usize, c: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok((self.predict_noise(x, t, c)?, 0.0))
    }
}

/// `eps_theta(x_t, t, c)`: an MLP over `[x, time embedding, c]` whose output
/// has the dimension of `x`.
///
/// With a variance head the network has one extra output, squashed to
/// `v` in `(-LOG_VAR_BOUND, LOG_VAR_BOUND)`, and the reverse step uses
/// variance `exp(v)` times the schedule's value. The head
/// starts at exactly zero (weights and bias), and noise-prediction training
/// never reaches it, so a pretrained model keeps the schedule's variance
/// until a preference objective moves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    net: Mlp,
    data_dim: usize,
    cond_dim: usize,
    total_steps: usize,
    #[serde(default)]
    variance_head: bool,
}

impl Denoiser {
    pub fn new(data_dim: usize, cond_dim: usize, total_steps: usize, arch: Architecture, rng: &mut RngState) -> Self {
        let sizes = arch.layer_sizes(data_dim + TIME_FEATURES + cond_dim, data_dim);
        Self {
            net: Mlp::init(&sizes, rng),
            data_dim,
            cond_dim,
            total_steps,
            variance_head: false,
        }
    }

    pub fn with_variance_head(
        data_dim: usize,
        cond_dim: usize,
        total_steps: usize,
        arch: Architecture,
        rng: &mut RngState,
    ) -> Self {
        let sizes = arch.layer_sizes(data_dim + TIME_FEATURES + cond_dim, data_dim + 1);
        let mut net = Mlp::init(&sizes, rng);
        let last = net.num_layers() - 1;
        let (w, b) = net.layer_offsets(last);
        let fan_in = sizes[sizes.len() - 2];
        let params = net.params_mut();
        params[w + data_dim * fan_in..w + (data_dim + 1) * fan_in].fill(0.0);
        params[b + data_dim] = 0.0;
        Self {
            net,
            data_dim,
            cond_dim,
            total_steps,
            variance_head: true,
        }
    }

    /// Wraps a network; an output one wider than `data_dim` is read as a
    /// variance head.
    pub fn from_mlp(net: Mlp, data_dim: usize, cond_dim: usize, total_steps: usize) -> Result<Self> {
        let out = net.output_dim();
        if net.input_dim() != data_dim + TIME_FEATURES + cond_dim || !(out == data_dim || out == data_dim + 1) {
            return Err(Error::config(format!(
                "network {:?} does not fit data_dim={data_dim}, cond_dim={cond_dim}",
                net.sizes()
            )));
        }
        Ok(Self {
            net,
            data_dim,
            cond_dim,
            total_steps,
            variance_head: out == data_dim + 1,
        })
    }

    pub fn has_variance_head(&self) -> bool {
        self.variance_head
    }

    /// The noise part of a cached forward pass.
    pub fn eps_of<'a>(&self, cache: &'a ForwardCache) -> &'a [f64] {
        &cache.output()[..self.data_dim]
    }

    /// The log variance multiplier of a cached forward pass.
    pub fn log_var_of(&self, cache: &ForwardCache) -> f64 {
        if self.variance_head {
            bounded_log_var(cache.output()[self.data_dim])
        } else {
            0.0
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    /// Copy of this denoiser with a different parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Self {
        let mut out = self.clone();
        out.net.params_mut().copy_from_slice(params);
        out
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }

    pub fn zero_grad(&self) -> Gradients {
        Gradients::zeros(self.num_params())
    }

    fn encode(&self, x: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::config(format!(
                "denoiser expects data dim {}, got {}",
                self.data_dim,
                x.len()
            )));
        }
        if c.len() != self.cond_dim {
            return Err(Error::config(format!(
                "denoiser expects condition dim {}, got {}",
                self.cond_dim,
                c.len()
            )));
        }
        if t > self.total_steps {
            return Err(Error::contract(format!(
                "timestep {t} outside 0..={}",
                self.total_steps
            )));
        }
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(x);
        input.extend_from_slice(&time_embedding(t, self.total_steps));
        input.extend_from_slice(c);
        Ok(input)
    }

    /// The noise prediction.
    pub fn forward(&self, x: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward(&self.encode(x, t, c)?);
        out.truncate(self.data_dim);
        Ok(out)
    }

    pub fn forward_cached(&self, x: &[f64], t: usize, c: &[f64]) -> Result<ForwardCache> {
        Ok(self.net.forward_cached(&self.encode(x, t, c)?))
    }

    /// Gradient of `<upstream, forward(x, t, c)>` with respect to the params.
    pub fn backward(&self, x: &[f64], t: usize, c: &[f64], upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.data_dim {
            return Err(Error::config(format!(
                "upstream has dim {}, output has {}",
                upstream.len(),
                self.data_dim
            )));
        }
        let cache = self.forward_cached(x, t, c)?;
        let mut grad = self.zero_grad();
        self.accumulate(&cache, upstream, &mut grad);
        Ok(grad)
    }

    /// Accumulates the backward pass of a cached forward into `grad`;
    /// `upstream` covers the noise outputs.
    pub fn accumulate(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut Gradients) {
        self.accumulate_step(cache, upstream, 0.0, grad);
    }

    /// Like [`Denoiser::accumulate`] with an extra upstream on the log
    /// variance output (ignored without a variance head).
    pub fn accumulate_step(
        &self,
        cache: &ForwardCache,
        eps_upstream: &[f64],
        log_var_upstream: f64,
        grad: &mut Gradients,
    ) {
        if self.variance_head {
            let v = self.log_var_of(cache) / LOG_VAR_BOUND;
            let mut full = eps_upstream.to_vec();
            full.push(log_var_upstream * LOG_VAR_GAIN * (1.0 - v * v));
            self.net.backward(cache, &full, grad.values_mut());
        } else {
            self.net.backward(cache, eps_upstream, grad.values_mut());
        }
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict_noise(&self, x: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t, c)
    }

    fn predict_step(&self, x: &[f64], t: usize, c: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut out = self.net.forward(&self.encode(x, t, c)?);
        let v = if self.variance_head {
            bounded_log_var(out[self.data_dim])
        } else {
            0.0
        };
        out.truncate(self.data_dim);
        Ok((out, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// Straight-line re-evaluation of the network, independent of `Mlp`.
    fn reference_forward(d: &Denoiser, x: &[f64], t: usize, c: &[f64]) -> Vec<f64> {
        let sizes = d.net().sizes();
        let p = d.params();
        let mut h: Vec<f64> = x
            .iter()
            .copied()
            .chain(time_embedding(t, d.total_steps()))
            .chain(c.iter().copied())
            .collect();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut out = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = p[off + n_in * n_out + o];
                for i in 0..n_in {
                    acc += p[off + o * n_in + i] * h[i];
                }
                out[o] = if l + 2 < sizes.len() { silu(acc) } else { acc };
            }
            off += n_in * n_out + n_out;
            h = out;
        }
        h
    }

    #[test]
    fn embedding_endpoints() {
        let e0 = time_embedding(0, 10);
        assert_eq!(e0[0], 0.0);
        assert_eq!(e0[1], 1.0);
        assert_eq!(e0[TIME_FEATURES - 1], 0.0);
        assert_eq!(time_embedding(10, 10)[TIME_FEATURES - 1], 1.0);
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut rng = RngState::new(0);
        let mut d = Denoiser::new(2, 1, 10, Architecture::default(), &mut rng);
        d.params_mut().iter_mut().for_each(|p| *p = 0.0);
        d.net_mut().set_output_bias(&[0.5, -0.25]);
        for t in [0, 3, 10] {
            let out = d.forward(&rng.gaussian(2), t, &[1.0]).unwrap();
            assert_eq!(out, vec![0.5, -0.25]);
        }
    }

    #[test]
    fn forward_is_pure_and_matches_reference() {
        let mut rng = RngState::new(4);
        let d = Denoiser::new(3, 2, 20, Architecture { width: 16, depth: 3 }, &mut rng);
        let x = rng.gaussian(3);
        let c = rng.gaussian(2);
        let a = d.forward(&x, 7, &c).unwrap();
        assert_eq!(a, d.forward(&x, 7, &c).unwrap());
        let b = reference_forward(&d, &x, 7, &c);
        for (u, v) in a.iter().zip(&b) {
            assert!(u.is_finite());
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut rng = RngState::new(0);
        let d = Denoiser::new(2, 0, 10, Architecture::default(), &mut rng);
        assert!(matches!(d.forward(&[0.0; 3], 1, &[]), Err(Error::Config(_))));
        assert!(matches!(d.forward(&[0.0; 2], 1, &[1.0]), Err(Error::Config(_))));
        assert!(matches!(d.backward(&[0.0; 2], 1, &[], &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn backward_linearity() {
        let mut rng = RngState::new(8);
        let d = Denoiser::new(2, 1, 10, Architecture { width: 8, depth: 3 }, &mut rng);
        let x = rng.gaussian(2);
        let up = rng.gaussian(2);
        let g = d.backward(&x, 4, &[0.3], &up).unwrap();
        let zero = d.backward(&x, 4, &[0.3], &[0.0, 0.0]).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let doubled: Vec<f64> = up.iter().map(|u| 2.0 * u).collect();
        let g2 = d.backward(&x, 4, &[0.3], &doubled).unwrap();
        for (a, b) in g.values().iter().zip(g2.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let d = Denoiser::new(2, 1, 10, Architecture { width: 8, depth: 3 }, &mut rng);
        let x = rng.gaussian(2);
        let up = rng.gaussian(2);
        let g = d.backward(&x, 6, &[1.0], &up).unwrap();
        let report = grad_check(
            |p| {
                let out = d.with_params(p).forward(&x, 6, &[1.0]).unwrap();
                out.iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            d.params(),
            g.values(),
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }
}
