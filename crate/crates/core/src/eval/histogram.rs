use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub start: f64,
    pub count: u64,
}

/// Counts values into `[k·w, (k+1)·w)` bins anchored at zero.
///
/// Bins run contiguously from zero (or the lowest occupied bin, for negative
/// data) to the highest occupied one; empty bins appear with count 0.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<Bin>, EvalError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(EvalError::BadBinWidth(bin_width));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let index = |v: f64| (v / bin_width).floor() as i64;
    let lo = values.iter().map(|&v| index(v)).min().unwrap().min(0);
    let hi = values.iter().map(|&v| index(v)).max().unwrap();
    let mut counts = vec![0u64; (hi - lo + 1) as usize];
    for &v in values {
        counts[(index(v) - lo) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| Bin {
            start: (lo + k as i64) as f64 * bin_width,
            count,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(b: &[Bin]) -> Vec<(f64, u64)> {
        b.iter().map(|b| (b.start, b.count)).collect()
    }

    #[test]
    fn small_cases() {
        assert_eq!(pairs(&histogram(&[0.5, 1.5, 1.6], 1.0).unwrap()), [(0.0, 1), (1.0, 2)]);
        assert!(histogram(&[], 1.0).unwrap().is_empty());
        assert_eq!(pairs(&histogram(&[1.0, 3.2], 1.0).unwrap()), [(0.0, 0), (1.0, 1), (2.0, 0), (3.0, 1)]);
        assert_eq!(pairs(&histogram(&[2.0], 2.0).unwrap()), [(0.0, 0), (2.0, 1)]);
        assert_eq!(pairs(&histogram(&[-0.5, 0.5], 1.0).unwrap()), [(-1.0, 1), (0.0, 1)]);
    }

    #[test]
    fn bad_width() {
        for w in [0.0, -1.0, f64::NAN] {
            assert_eq!(histogram(&[1.0], w).unwrap_err().code(), "BAD_BIN_WIDTH");
        }
    }
}
