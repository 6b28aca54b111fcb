//! Image-similarity and diversity metrics.
//!
//! Images are grayscale with pixels in `[0, 1]`. Histogram-based entropies
//! quantize each value `v` to level `round(v * (bins - 1))`. The 2-D entropy
//! pairs each pixel with the mean of its in-bounds 4-neighbours.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::RngState;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const DEFAULT_BINS: usize = 256;
/// Images drawn per prompt after the base image.
pub const PROTOCOL_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != pixels.len() {
            return Err(Error::contract(format!(
                "{width}x{height} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Portable graymap, ASCII (`P2`) or binary (`P5`), maxval 255.
    pub fn write_pgm(&self, path: &Path, binary: bool) -> Result<()> {
        let levels: Vec<u8> = self.pixels.iter().map(|p| quantize(*p, 256) as u8).collect();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        if binary {
            write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
            out.write_all(&levels)?;
        } else {
            writeln!(out, "P2\n{} {}\n255", self.width, self.height)?;
            for row in levels.chunks(self.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn same_shape(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn quantize(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * (bins - 1) as f64).round() as usize).min(bins - 1)
}

pub fn rmse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_shape(a, b)?;
    let sq: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.pixels.len() as f64).sqrt())
}

/// `20 log10(peak / rmse)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64> {
    let e = rmse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / e).log10())
}

/// Mean SSIM over all 8x8 windows at stride 1, peak 1.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, image is {}x{}",
            a.width, a.height
        )));
    }
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=a.height - SSIM_WINDOW {
        for x0 in 0..=a.width - SSIM_WINDOW {
            let coords = || (y0..y0 + SSIM_WINDOW).flat_map(move |y| (x0..x0 + SSIM_WINDOW).map(move |x| (x, y)));
            let mu_a = coords().map(|(x, y)| a.get(x, y)).sum::<f64>() / n;
            let mu_b = coords().map(|(x, y)| b.get(x, y)).sum::<f64>() / n;
            let moment = |p: &GrayImage, mp: f64, q: &GrayImage, mq: f64| {
                coords()
                    .map(|(x, y)| (p.get(x, y) - mp) * (q.get(x, y) - mq))
                    .sum::<f64>()
                    / n
            };
            let var_a = moment(a, mu_a, a, mu_a);
            let var_b = moment(b, mu_b, b, mu_b);
            let cov = moment(a, mu_a, b, mu_b);
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

fn shannon_bits<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h = -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Entropy in bits of a probability vector (zero entries contribute nothing).
pub fn entropy_bits(p: &[f64]) -> f64 {
    let h = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
    h.max(0.0)
}

pub fn entropy_1d(img: &GrayImage, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::contract("entropy needs at least 2 bins"));
    }
    let mut hist = vec![0usize; bins];
    for &p in &img.pixels {
        hist[quantize(p, bins)] += 1;
    }
    Ok(shannon_bits(hist))
}

pub fn entropy_2d(img: &GrayImage, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::contract("entropy needs at least 2 bins"));
    }
    if img.width < 2 || img.height < 2 {
        return Err(Error::contract("2-D entropy needs an image of at least 2x2"));
    }
    let mut hist = std::collections::HashMap::<(usize, usize), usize>::new();
    let (w, h) = (img.width as isize, img.height as isize);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0.0;
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    sum += img.get(nx as usize, ny as usize);
                    count += 1.0;
                }
            }
            let key = (
                quantize(img.get(x as usize, y as usize), bins),
                quantize(sum / count, bins),
            );
            *hist.entry(key).or_default() += 1;
        }
    }
    let mut counts: Vec<usize> = hist.into_values().collect();
    counts.sort_unstable();
    Ok(shannon_bits(counts))
}

/// Preferred direction of a metric when the goal is output diversity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Higher,
    Lower,
}

/// Diversity reading of each report column: distinct samples have large
/// RMSE, low PSNR and SSIM, and high entropies.
pub const DIVERSITY_DIRECTIONS: [(&str, Direction); 5] = [
    ("rmse", Direction::Higher),
    ("psnr", Direction::Lower),
    ("ssim", Direction::Lower),
    ("e1", Direction::Higher),
    ("e2", Direction::Higher),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub e1: f64,
    pub e2: f64,
    pub samples: usize,
}

impl DiversityReport {
    pub const CSV_HEADER: &'static str = "prompt,rmse,psnr,ssim,e1,e2,samples";

    pub fn csv_row(&self, prompt: usize) -> String {
        format!(
            "{prompt},{},{},{},{},{},{}",
            self.rmse, self.psnr, self.ssim, self.e1, self.e2, self.samples
        )
    }
}

/// Source of images for the diversity protocol.
pub trait ImageSampler {
    fn sample_image(&self, prompt: &[f64], rng: &mut RngState) -> Result<GrayImage>;
}

impl<F> ImageSampler for F
where
    F: Fn(&[f64], &mut RngState) -> Result<GrayImage>,
{
    fn sample_image(&self, prompt: &[f64], rng: &mut RngState) -> Result<GrayImage> {
        self(prompt, rng)
    }
}

/// For each prompt: one base image and [`PROTOCOL_SAMPLES`] more. RMSE, PSNR
/// and SSIM compare the base against each sample; entropies are taken over
/// the samples. All five are averaged.
pub fn diversity_protocol<S: ImageSampler + ?Sized>(
    sampler: &S,
    prompts: &[Vec<f64>],
    rng: &mut RngState,
) -> Result<Vec<DiversityReport>> {
    if prompts.is_empty() {
        return Err(Error::contract("diversity protocol needs at least one prompt"));
    }
    let k = PROTOCOL_SAMPLES as f64;
    prompts
        .iter()
        .map(|prompt| {
            let base = sampler.sample_image(prompt, rng)?;
            let mut report = DiversityReport {
                rmse: 0.0,
                psnr: 0.0,
                ssim: 0.0,
                e1: 0.0,
                e2: 0.0,
                samples: PROTOCOL_SAMPLES,
            };
            for _ in 0..PROTOCOL_SAMPLES {
                let img = sampler.sample_image(prompt, rng)?;
                report.rmse += rmse(&base, &img)?;
                report.psnr += psnr(&base, &img, 1.0)?;
                report.ssim += ssim(&base, &img)?;
                report.e1 += entropy_1d(&img, DEFAULT_BINS)?;
                report.e2 += entropy_2d(&img, DEFAULT_BINS)?;
            }
            for v in [
                &mut report.rmse,
                &mut report.psnr,
                &mut report.ssim,
                &mut report.e1,
                &mut report.e2,
            ] {
                *v /= k;
            }
            Ok(report)
        })
        .collect()
}

/// Fraction of samples whose nearest center (Euclidean, ties to the lower
/// index) is each center.
pub fn mode_coverage(samples: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(Error::contract("mode coverage needs at least one center"));
    }
    if samples.is_empty() {
        return Err(Error::contract("mode coverage needs at least one sample"));
    }
    let mut counts = vec![0usize; centers.len()];
    for s in samples {
        counts[nearest_center(s, centers)] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / samples.len() as f64).collect())
}

pub fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = crate::numerics::squared_distance(x, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}
