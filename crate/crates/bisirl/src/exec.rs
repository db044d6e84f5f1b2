//! Deterministic fan-out helpers for the data-parallel inner loops.
//!
//! Every batched operation in this crate (rollout batches, SPSA draw
//! averaging) derives one child RNG per work item up front and reduces the
//! per-item results in index order, so the output is bit-identical whether
//! the items run on the rayon pool or on the current thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives `n` independently seeded child RNGs from `rng`, one per work item.
pub fn fork_rngs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|_| ChaCha8Rng::seed_from_u64(rng.random()))
        .collect()
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Splits `0..n` into at most `max_chunks` contiguous ranges.
pub fn chunk_ranges(n: usize, max_chunks: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = max_chunks.max(1).min(n.max(1));
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_exactly() {
        for n in [0usize, 1, 7, 64, 100_001] {
            let ranges = chunk_ranges(n, 64);
            let mut next = 0;
            for r in &ranges {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, n);
        }
    }

    #[test]
    fn forked_rngs_are_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ra = fork_rngs(&mut a, 4);
        let rb = fork_rngs(&mut b, 4);
        for (mut x, mut y) in ra.into_iter().zip(rb) {
            assert_eq!(x.random::<u64>(), y.random::<u64>());
        }
    }
}
