//! Latency percentiles.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PercentileError {
    #[error("percentile of an empty sample set")]
    Empty,
    #[error("percentile fraction {0} outside (0, 1]")]
    BadFraction(f64),
}

/// Nearest-rank percentile: the element at 0-based index `ceil(p * n) - 1`
/// of the ascending sort.
pub fn percentile<T: Ord + Copy>(samples: &[T], p: f64) -> Result<T, PercentileError> {
    if samples.is_empty() {
        return Err(PercentileError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(PercentileError::BadFraction(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[nearest_rank_index(sorted.len(), p)])
}

/// Percentile of data that is already sorted ascending.
pub fn percentile_sorted<T: Copy>(sorted: &[T], p: f64) -> Result<T, PercentileError> {
    if sorted.is_empty() {
        return Err(PercentileError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(PercentileError::BadFraction(p));
    }
    Ok(sorted[nearest_rank_index(sorted.len(), p)])
}

fn nearest_rank_index(n: usize, p: f64) -> usize {
    // `p * n` can land a hair above an integer (0.7 * 10 = 7.000000000000001);
    // snap near-integers before taking the ceiling.
    let x = p * n as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (snapped as usize).clamp(1, n) - 1
}
