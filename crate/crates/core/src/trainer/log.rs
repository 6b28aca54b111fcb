use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RUNLOG_SCHEMA: &str = "prefdiff.runlog/1";

/// One evaluation of the policy.
///
/// For the image dataset `e1`/`e2` are the pixel entropies of the diversity
/// protocol and `rmse`/`psnr`/`ssim` are filled in; for the 2-D mixture
/// `e1` is the entropy (bits) of nearest-mode coverage, `e2` the entropy of
/// a 16x16 occupancy histogram on `[-2.5, 2.5]^2`, and the image columns
/// are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    #[serde(with = "crate::numerics::nonfinite")]
    pub proxy_reward: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub true_reward: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub kl: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub kl_stderr: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub e1: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub e2: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub rmse: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub psnr: f64,
    #[serde(with = "crate::numerics::nonfinite")]
    pub ssim: f64,
    /// Mean training loss over the updates since the previous row.
    #[serde(with = "crate::numerics::nonfinite")]
    pub loss: f64,
    pub dataset_size: usize,
    pub coverage: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    /// Fixed columns, then one `coverage_k` column per mode.
    pub const CSV_COLUMNS: [&'static str; 13] = [
        "step",
        "proxy_reward",
        "true_reward",
        "kl",
        "kl_stderr",
        "e1",
        "e2",
        "rmse",
        "psnr",
        "ssim",
        "loss",
        "dataset_size",
        "coverage",
    ];

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let modes = self.rows.first().map_or(0, |r| r.coverage.len());
        let mut out = format!("# {RUNLOG_SCHEMA}\n");
        out += &Self::CSV_COLUMNS[..12].join(",");
        for k in 0..modes {
            write!(out, ",coverage_{k}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.proxy_reward,
                r.true_reward,
                r.kl,
                r.kl_stderr,
                r.e1,
                r.e2,
                r.rmse,
                r.psnr,
                r.ssim,
                r.loss,
                r.dataset_size
            )
            .unwrap();
            for v in &r.coverage {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "schema": RUNLOG_SCHEMA,
            "rows": self.rows,
        }))?)
    }

    /// Writes `runlog.csv` and `runlog.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("runlog.csv"), self.to_csv())?;
        std::fs::write(dir.join("runlog.json"), self.to_json()?)?;
        Ok(())
    }
}

/// Least-squares slope of `ys` against `0, 1, ..`. NaN for fewer than two
/// points.
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean_x = (n - 1) as f64 / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HackingReport {
    pub flagged: bool,
    /// Index of the first row of the earliest flagged window.
    pub first_row: Option<usize>,
    /// Training step of that row.
    pub first_step: Option<usize>,
    pub windows_checked: usize,
}

/// Slides a window of `window` rows over the log and flags the earliest one
/// in which the proxy reward trends up while the true reward or the first
/// diversity score trends down.
pub fn detect_reward_hacking(log: &RunLog, window: usize) -> Result<HackingReport> {
    if window < 2 {
        return Err(Error::config("hacking detector window must be at least 2"));
    }
    if log.len() < 2 * window {
        return Err(Error::contract(format!(
            "hacking detector needs at least {} rows for window {window}, log has {}",
            2 * window,
            log.len()
        )));
    }
    let series = |f: fn(&LogRow) -> f64| log.rows.iter().map(f).collect::<Vec<_>>();
    let proxy = series(|r| r.proxy_reward);
    let truth = series(|r| r.true_reward);
    let e1 = series(|r| r.e1);
    let windows = log.len() - window + 1;
    for start in 0..windows {
        let range = start..start + window;
        let up = least_squares_slope(&proxy[range.clone()]) > 0.0;
        let truth_down = least_squares_slope(&truth[range.clone()]) < 0.0;
        let diversity_down = least_squares_slope(&e1[range]) < 0.0;
        if up && (truth_down || diversity_down) {
            return Ok(HackingReport {
                flagged: true,
                first_row: Some(start),
                first_step: Some(log.rows[start].step),
                windows_checked: start + 1,
            });
        }
    }
    Ok(HackingReport {
        flagged: false,
        first_row: None,
        first_step: None,
        windows_checked: windows,
    })
}
