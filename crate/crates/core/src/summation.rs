//! Fixed-order reductions.
//!
//! Every metric in this crate reduces through [`pairwise_sum`] so that a sum
//! over the same values in the same order is bit-identical regardless of how
//! many threads produced the values.

const BASE_BLOCK: usize = 16;

/// Pairwise (cascade) summation over a slice in index order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= BASE_BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Arithmetic mean via [`pairwise_sum`]; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

/// Population standard deviation (divisor n).
pub fn population_std(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    Some((pairwise_sum(&sq) / values.len() as f64).sqrt())
}
