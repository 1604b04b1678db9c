//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) the hot per-item loops fan out
//! over rayon; without it they run as plain iterators. Either way, per-item
//! results are collected in canonical input order and every reduction runs
//! over that ordered buffer, so the two builds produce bit-identical numbers.
//! The feature only changes wall-clock time — see `benches/parallel.rs`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Maps `f` over the items of a slice, returning results in input order.
#[cfg(feature = "parallel")]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `f` over the items of a slice, returning results in input order.
#[cfg(not(feature = "parallel"))]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sums a slice by recursive pairwise splitting.
///
/// The reduction tree depends only on the slice length, never on thread
/// scheduling, so sums are reproducible across runs, thread counts, and the
/// `parallel` feature itself. The tree also keeps rounding error lower than a
/// left-to-right fold for long inputs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_sequential_on_small_inputs() {
        let xs: Vec<f64> = (0..7).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>());
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn pairwise_sum_is_deterministic_for_long_inputs() {
        let xs: Vec<f64> = (0..10_001)
            .map(|i| ((i * 37) % 101) as f64 * 1e-3)
            .collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
        // close to (but not necessarily bit-equal to) the naive fold
        assert!((a - xs.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
