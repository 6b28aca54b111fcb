//! Toy datasets.
//!
//! Two sources ship with the crate:
//!
//! - `mixture4`: a 2-D mixture of four isotropic Gaussians at `(±1, ±1)`,
//!   unconditional. Mode collapse is measured by nearest-center coverage.
//! - `blobs8x8`: 64-dim vectors read as 8x8 grayscale images, each with two
//!   Gaussian blobs. The condition is a one-hot "prompt": prompt 0 places the
//!   blobs side by side, prompt 1 stacks them vertically. Pixels in `[0, 1]`
//!   are mapped to model space as `2 p - 1`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::RngState;
use crate::{Error, Result};

/// One training example: a data vector and its conditioning vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

pub trait Dataset: Send + Sync {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// The prompt set: every conditioning vector the dataset uses.
    fn conditions(&self) -> Vec<Vec<f64>>;
    fn sample_for(&self, prompt: usize, rng: &mut RngState) -> DataPoint;

    fn sample(&self, rng: &mut RngState) -> DataPoint {
        let n = self.conditions().len();
        let prompt = if n > 1 { rng.below(n) } else { 0 };
        self.sample_for(prompt, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mixture4,
    Blobs8x8,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture4" => Ok(DatasetKind::Mixture4),
            "blobs8x8" => Ok(DatasetKind::Blobs8x8),
            other => Err(Error::config(format!(
                "unknown dataset `{other}` (expected mixture4 or blobs8x8)"
            ))),
        }
    }
}

impl DatasetKind {
    pub fn build(self) -> Box<dyn Dataset> {
        match self {
            DatasetKind::Mixture4 => Box::new(GaussianMixture::four_modes()),
            DatasetKind::Blobs8x8 => Box::new(BlobImages::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn four_modes() -> Self {
        Self {
            centers: vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
            weights: vec![0.25; 4],
            std: 0.15,
        }
    }

    pub fn sample_component(&self, rng: &mut RngState) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }
}

impl Dataset for GaussianMixture {
    fn data_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn conditions(&self) -> Vec<Vec<f64>> {
        vec![Vec::new()]
    }

    fn sample_for(&self, _prompt: usize, rng: &mut RngState) -> DataPoint {
        let k = self.sample_component(rng);
        let noise = rng.gaussian(self.data_dim());
        let x = self.centers[k]
            .iter()
            .zip(noise)
            .map(|(m, z)| m + self.std * z)
            .collect();
        DataPoint { x, c: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobImages {
    pub side: usize,
}

impl Default for BlobImages {
    fn default() -> Self {
        Self { side: 8 }
    }
}

impl BlobImages {
    pub const PROMPTS: usize = 2;

    /// Renders the pixel image (values in `[0, 1]`) for a prompt.
    pub fn render(&self, prompt: usize, rng: &mut RngState) -> Vec<f64> {
        let n = self.side as f64;
        let jitter = |rng: &mut RngState| 0.5 + (n - 1.0) * (0.1 + 0.3 * rng.uniform());
        let (a, b) = if prompt == 0 {
            let row = 1.5 + (n - 4.0) * rng.uniform();
            let left = (jitter(rng) * 0.5, row);
            let right = (n - 1.0 - jitter(rng) * 0.5, row + rng.uniform() - 0.5);
            (left, right)
        } else {
            let col = 1.5 + (n - 4.0) * rng.uniform();
            let top = (col, jitter(rng) * 0.5);
            let bottom = (col + rng.uniform() - 0.5, n - 1.0 - jitter(rng) * 0.5);
            (top, bottom)
        };
        let wa = 0.8 + 0.7 * rng.uniform();
        let wb = 0.8 + 0.7 * rng.uniform();
        let mut pixels = Vec::with_capacity(self.side * self.side);
        for y in 0..self.side {
            for x in 0..self.side {
                let (fx, fy) = (x as f64, y as f64);
                let ga = (-((fx - a.0).powi(2) + (fy - a.1).powi(2)) / (2.0 * wa * wa)).exp();
                let gb = (-((fx - b.0).powi(2) + (fy - b.1).powi(2)) / (2.0 * wb * wb)).exp();
                pixels.push((ga + gb).min(1.0));
            }
        }
        pixels
    }

    pub fn one_hot(prompt: usize) -> Vec<f64> {
        let mut c = vec![0.0; Self::PROMPTS];
        c[prompt] = 1.0;
        c
    }
}

/// Pixel value in `[0, 1]` to model space.
pub fn pixels_to_model(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|p| 2.0 * p - 1.0).collect()
}

/// Model space back to pixels, clamped to `[0, 1]`.
pub fn model_to_pixels(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

impl Dataset for BlobImages {
    fn data_dim(&self) -> usize {
        self.side * self.side
    }

    fn cond_dim(&self) -> usize {
        Self::PROMPTS
    }

    fn conditions(&self) -> Vec<Vec<f64>> {
        (0..Self::PROMPTS).map(Self::one_hot).collect()
    }

    fn sample_for(&self, prompt: usize, rng: &mut RngState) -> DataPoint {
        DataPoint {
            x: pixels_to_model(&self.render(prompt, rng)),
            c: Self::one_hot(prompt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_component_frequencies() {
        let mix = GaussianMixture::four_modes();
        let mut rng = RngState::new(1);
        let mut counts = [0usize; 4];
        for _ in 0..8000 {
            counts[mix.sample_component(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 8000.0 - 0.25).abs() < 0.03);
        }
    }

    #[test]
    fn blob_pixels_in_unit_range() {
        let blobs = BlobImages::default();
        let mut rng = RngState::new(2);
        for prompt in 0..2 {
            let p = blobs.render(prompt, &mut rng);
            assert_eq!(p.len(), 64);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(p.iter().cloned().fold(0.0, f64::max) > 0.5);
        }
        let point = blobs.sample_for(1, &mut rng);
        assert_eq!(point.c, vec![0.0, 1.0]);
        assert_eq!(
            model_to_pixels(&pixels_to_model(&[0.0, 0.25, 1.0])),
            vec![0.0, 0.25, 1.0]
        );
    }

    #[test]
    fn dataset_kind_parsing() {
        assert_eq!("mixture4".parse::<DatasetKind>().unwrap(), DatasetKind::Mixture4);
        assert!(matches!("moons".parse::<DatasetKind>(), Err(Error::Config(_))));
    }
}
