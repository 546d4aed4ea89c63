use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::stats::t_quantile;

/// Boxplot notch constant: half-width is `NOTCH_K * IQR / sqrt(n)`.
pub const NOTCH_K: f64 = 1.57;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
    pub confidence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Set when n == 1 and the interval collapses to the single value.
    pub ci_degenerate: bool,
    pub five: FiveNumber,
    pub notch: f64,
}

/// Sample statistics, Student-t interval and Tukey-hinge boxplot numbers.
pub fn summarize(metric: &str, values: &[f64], confidence: f64) -> Result<MetricSummary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::BadConfidence(confidence));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stddev = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = if n > 1 {
        t_quantile(1.0 - (1.0 - confidence) / 2.0, (n - 1) as f64) * stddev / (n as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let five = tukey(&sorted);
    let notch = NOTCH_K * (five.q3 - five.q1) / (n as f64).sqrt();
    Ok(MetricSummary {
        metric: metric.to_string(),
        n,
        mean,
        stddev,
        confidence,
        // Clamp so rounding never puts the mean outside its own interval.
        ci_low: (mean - half).min(mean),
        ci_high: (mean + half).max(mean),
        ci_degenerate: n == 1,
        five,
        notch,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Hinges are medians of the halves; for odd n both halves keep the median.
fn tukey(sorted: &[f64]) -> FiveNumber {
    let n = sorted.len();
    let h = n.div_ceil(2);
    FiveNumber {
        min: sorted[0],
        q1: median(&sorted[..h]),
        median: median(sorted),
        q3: median(&sorted[n - h..]),
        max: sorted[n - 1],
    }
}
