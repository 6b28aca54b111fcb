//! A small fully connected network with hand-written reverse mode.
//!
//! Parameters live in one flat vector: for each layer the weight matrix
//! (row-major, `out x in`) followed by the bias. Hidden layers use SiLU,
//! the output layer is linear. The flat layout keeps the optimizer, the
//! finite-difference checker and checkpointing trivial.

use serde::{Deserialize, Serialize};

use super::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }
}

/// Gradient of a scalar with respect to every entry of an [`Mlp`]'s flat
/// parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        assert_eq!(self.len(), other.len(), "gradient shapes differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    /// All-zero network with the given layer widths (`sizes[0]` is the input).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let count = sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero. The output layer is
    /// scaled down so fresh networks start close to the zero function.
    pub fn init(sizes: &[usize], rng: &mut RngState) -> Self {
        let mut net = Self::zeros(sizes);
        let layers = net.num_layers();
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt() * if l + 1 == layers { 0.1 } else { 1.0 };
            let (w, _) = net.layer_offsets(l);
            for k in 0..fan_in * fan_out {
                net.params[w + k] = scale * rng.standard_normal();
            }
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> crate::Result<Self> {
        let mut net = Self::zeros(sizes);
        if params.len() != net.params.len() {
            return Err(crate::Error::config(format!(
                "parameter vector has {} entries, architecture {:?} needs {}",
                params.len(),
                sizes,
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets every output bias to `bias`, leaving weights untouched.
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.output_dim());
        let (_, b) = self.layer_offsets(self.num_layers() - 1);
        self.params[b..b + bias.len()].copy_from_slice(bias);
    }

    /// Offsets of the weight block and bias block of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.sizes[k + 1] * self.sizes[k] + self.sizes[k + 1];
        }
        (off, off + self.sizes[l + 1] * self.sizes[l])
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim(), "MLP input dimension");
        let layers = self.num_layers();
        let mut current = input.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = b.to_vec();
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                next[o] += dot(row, &current);
            }
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = silu(*v));
            }
            off += n_in * n_out + n_out;
            current = next;
        }
        current
    }

    pub fn forward_cached(&self, input: &[f64]) -> ForwardCache {
        assert_eq!(input.len(), self.input_dim(), "MLP input dimension");
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers - 1);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = acts.last().unwrap();
            let mut z = b.to_vec();
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                z[o] += dot(row, x);
            }
            off += n_in * n_out + n_out;
            if l + 1 < layers {
                let a = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        ForwardCache { acts, pre }
    }

    /// Accumulates `d<upstream, output>/d params` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) {
        assert_eq!(upstream.len(), self.output_dim(), "upstream dimension");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer shape");
        let layers = self.num_layers();
        let mut delta = upstream.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let x = &cache.acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wv;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                *p *= silu_grad(z);
            }
            delta = prev;
        }
    }

    /// FNV-1a over the bit patterns of sizes and parameters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: [u8; 8]| {
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &s in &self.sizes {
            eat((s as u64).to_le_bytes());
        }
        for &p in &self.params {
            eat(p.to_bits().to_le_bytes());
        }
        h
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
