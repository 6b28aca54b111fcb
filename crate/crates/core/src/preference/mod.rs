//! Synthetic rewards, Bradley-Terry labels and preference datasets.

mod model;

pub use model::{
    bt_loss, bt_loss_at, pairwise_accuracy, stepwise_score, train_reward_model, FitReport, RewardFitConfig, RewardModel,
};

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::model_to_pixels;
use crate::numerics::{sigmoid, squared_distance, RngState};
use crate::{Error, Result};

pub const PAIR_SCHEMA: &str = "prefdiff.pair/1";

/// Ground-truth reward `r(c, x0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    /// `-||x0 - target||^2`: everything is pulled toward one mode.
    ModeSeeking { target: Vec<f64> },
    /// `-min_k ||x0 - c_k||^2`: realism, high near any mode.
    NearestMode { centers: Vec<Vec<f64>> },
    /// Mean squared difference between 4-neighbouring pixels of a square
    /// image in model space. Flat images score 0, the minimum.
    BlobSharpness,
    /// `values[a]` for the action `a = x0[0]`.
    Table { values: Vec<f64> },
}

impl RewardSpec {
    pub fn reward(&self, _c: &[f64], x0: &[f64]) -> Result<f64> {
        match self {
            RewardSpec::ModeSeeking { target } => {
                dims_match(x0, target)?;
                Ok(-squared_distance(x0, target))
            }
            RewardSpec::NearestMode { centers } => {
                if centers.is_empty() {
                    return Err(Error::config("nearest-mode reward needs at least one center"));
                }
                let mut best = f64::INFINITY;
                for c in centers {
                    dims_match(x0, c)?;
                    best = best.min(squared_distance(x0, c));
                }
                Ok(-best)
            }
            RewardSpec::BlobSharpness => {
                let side = (x0.len() as f64).sqrt().round() as usize;
                if side < 2 || side * side != x0.len() {
                    return Err(Error::config(format!(
                        "blob sharpness needs a square image, got {} values",
                        x0.len()
                    )));
                }
                let px = model_to_pixels(x0);
                let mut sum = 0.0;
                let mut count = 0usize;
                for y in 0..side {
                    for x in 0..side {
                        let v = px[y * side + x];
                        if x + 1 < side {
                            sum += (px[y * side + x + 1] - v).powi(2);
                            count += 1;
                        }
                        if y + 1 < side {
                            sum += (px[(y + 1) * side + x] - v).powi(2);
                            count += 1;
                        }
                    }
                }
                Ok(sum / count as f64)
            }
            RewardSpec::Table { values } => {
                let a = x0.first().copied().unwrap_or(f64::NAN);
                if !(a >= 0.0) || a.fract() != 0.0 || a as usize >= values.len() {
                    return Err(Error::contract(format!(
                        "table reward needs an action index below {}, got {a}",
                        values.len()
                    )));
                }
                Ok(values[a as usize])
            }
        }
    }
}

/// Anything that assigns a scalar preference score to a clean sample.
pub trait Scorer: Sync {
    fn score(&self, c: &[f64], x: &[f64]) -> Result<f64>;
}

impl Scorer for RewardSpec {
    fn score(&self, c: &[f64], x: &[f64]) -> Result<f64> {
        self.reward(c, x)
    }
}

fn dims_match(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "sample has dim {}, reward expects {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sigma(r_w - r_l)`. Negative gaps are evaluated as `1 - sigma(|gap|)`,
/// so swapping the arguments gives exactly the complement.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    let z = r_w - r_l;
    if z < 0.0 {
        1.0 - sigmoid(-z)
    } else {
        sigmoid(z)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Deterministic,
    Stochastic,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(LabelMode::Deterministic),
            "stochastic" => Ok(LabelMode::Stochastic),
            other => Err(Error::config(format!("unknown label mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub c: Vec<f64>,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
    /// `sigma(|r_a - r_b|)`, always in `[0.5, 1]`.
    pub confidence: f64,
}

/// Decides whether `a` wins given the two rewards.
///
/// Deterministic mode picks the larger reward; an exact tie goes to the
/// lexicographically smaller sample. Stochastic mode draws one uniform and
/// lets `a` win with probability `sigma(r_a - r_b)`.
pub fn first_wins(r_a: f64, r_b: f64, x_a: &[f64], x_b: &[f64], mode: LabelMode, rng: &mut RngState) -> bool {
    match mode {
        LabelMode::Deterministic => match r_a.partial_cmp(&r_b) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => lexicographic(x_a, x_b) != Ordering::Greater,
        },
        LabelMode::Stochastic => rng.uniform() < bt_probability(r_a, r_b),
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Labels `(x_a, x_b)` with any scorer.
pub fn label_pair<S: Scorer + ?Sized>(
    scorer: &S,
    c: &[f64],
    x_a: &[f64],
    x_b: &[f64],
    mode: LabelMode,
    rng: &mut RngState,
) -> Result<PreferencePair> {
    if x_a == x_b {
        return Err(Error::contract("cannot label two identical samples"));
    }
    let r_a = scorer.score(c, x_a)?;
    let r_b = scorer.score(c, x_b)?;
    let (x_w, x_l) = if first_wins(r_a, r_b, x_a, x_b, mode, rng) {
        (x_a, x_b)
    } else {
        (x_b, x_a)
    };
    Ok(PreferencePair {
        c: c.to_vec(),
        x_w: x_w.to_vec(),
        x_l: x_l.to_vec(),
        confidence: bt_probability((r_a - r_b).abs(), 0.0),
    })
}

pub fn sample_preference(
    spec: &RewardSpec,
    c: &[f64],
    x_a: &[f64],
    x_b: &[f64],
    rng: &mut RngState,
    mode: LabelMode,
) -> Result<PreferencePair> {
    label_pair(spec, c, x_a, x_b, mode, rng)
}

#[derive(Serialize, Deserialize)]
struct PairLine<'a> {
    schema: std::borrow::Cow<'a, str>,
    #[serde(flatten)]
    pair: std::borrow::Cow<'a, PreferencePair>,
}

/// One JSON object per line, each tagged with [`PAIR_SCHEMA`].
pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        let line = PairLine {
            schema: PAIR_SCHEMA.into(),
            pair: std::borrow::Cow::Borrowed(pair),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    if !path.exists() {
        return Err(Error::Missing(format!("pair file {}", path.display())));
    }
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(&line)?;
        if parsed.schema != PAIR_SCHEMA {
            return Err(Error::config(format!(
                "line {}: schema `{}` is not {PAIR_SCHEMA}",
                n + 1,
                parsed.schema
            )));
        }
        pairs.push(parsed.pair.into_owned());
    }
    Ok(pairs)
}
