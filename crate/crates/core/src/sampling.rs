//! Seeded, platform-independent index selection.
//!
//! Indices are drawn as `u64` from a ChaCha8 stream so the same seed selects
//! the same elements on 32- and 64-bit targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// In-place Fisher-Yates shuffle: for `i` from `len-1` down to 1, swap `i`
/// with a uniform `j` in `0..=i`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

/// Draws `k` distinct indices from `0..n` without replacement (partial
/// Fisher-Yates from the front). Panics if `k > n`.
pub fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i as u64..n as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        fisher_yates(&mut a, &mut seeded_rng(3));
        fisher_yates(&mut b, &mut seeded_rng(3));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sample_is_distinct() {
        let s = sample_indices(20, 20, &mut seeded_rng(1));
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(sample_indices(5, 0, &mut seeded_rng(1)), Vec::<usize>::new());
    }
}
