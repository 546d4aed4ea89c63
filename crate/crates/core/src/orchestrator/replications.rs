use crate::stats::normal_quantile;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplicationError {
    #[error("mean must be non-zero")]
    ZeroMean,
    #[error("relative error must be positive")]
    NonPositiveRelError,
    #[error("standard deviation must be non-negative")]
    NegativeStddev,
    #[error("confidence must lie in (0, 1)")]
    BadConfidence,
}

/// Smallest replication count whose normal-approximation confidence
/// interval half-width `z·s/√n` is at most `rel_error·|mean|`.
pub fn required_replications(
    mean: f64,
    stddev: f64,
    confidence: f64,
    rel_error: f64,
) -> Result<u64, ReplicationError> {
    if mean == 0.0 || !mean.is_finite() {
        return Err(ReplicationError::ZeroMean);
    }
    if !(rel_error > 0.0) {
        return Err(ReplicationError::NonPositiveRelError);
    }
    if !(stddev >= 0.0) {
        return Err(ReplicationError::NegativeStddev);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(ReplicationError::BadConfidence);
    }
    let z = normal_quantile(1.0 - (1.0 - confidence) / 2.0);
    let n = (z * stddev / (rel_error * mean.abs())).powi(2).ceil();
    Ok((n as u64).max(1))
}
