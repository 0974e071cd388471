//! Small descriptive statistics: mean with standard error, histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and standard error of the mean; `stderr` is `None` for fewer than
/// two values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Parameter("cannot summarize an empty sample".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Ok(Summary { n, mean, stderr })
}

/// How values are assigned to bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Binning {
    /// Nearest center wins; ties go to the lower center.
    Centers(Vec<f64>),
    /// `count` equal-width bins over `[lo, hi]`; out-of-range values are
    /// clamped into the end bins.
    Uniform { count: usize, lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Representative value of each bin (center).
    pub centers: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn histogram(values: &[f64], binning: &Binning) -> Result<Histogram> {
    match binning {
        Binning::Centers(centers) => {
            if centers.is_empty() {
                return Err(Error::Parameter("histogram needs at least one bin".into()));
            }
            if centers.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Parameter("bin centers must be strictly increasing".into()));
            }
            let mut counts = vec![0u64; centers.len()];
            for &v in values {
                let idx = centers.partition_point(|&c| c < v);
                let bin = if idx == 0 {
                    0
                } else if idx == centers.len() {
                    idx - 1
                } else if v - centers[idx - 1] <= centers[idx] - v {
                    idx - 1
                } else {
                    idx
                };
                counts[bin] += 1;
            }
            Ok(Histogram {
                centers: centers.clone(),
                counts,
            })
        }
        &Binning::Uniform { count, lo, hi } => {
            if count == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Parameter(format!(
                    "uniform binning needs count > 0 and lo < hi, got {count} over [{lo}, {hi}]"
                )));
            }
            let width = (hi - lo) / count as f64;
            let mut counts = vec![0u64; count];
            for &v in values {
                let b = ((v - lo) / width).floor();
                let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(count - 1) };
                counts[b] += 1;
            }
            let centers = (0..count).map(|i| lo + (i as f64 + 0.5) * width).collect();
            Ok(Histogram { centers, counts })
        }
    }
}
