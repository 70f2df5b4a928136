//! Data-parallel execution helpers.
//!
//! Every hot kernel in the crate is expressed as a set of independent
//! chunk computations scheduled through this module. With the default
//! `parallel` feature the chunks run on the rayon pool; without it (or
//! after [`force_sequential`]) they run in index order on the calling
//! thread.
//!
//! Both paths execute the exact same per-chunk code, and chunks never
//! share mutable state, so results are bitwise identical regardless of
//! worker count. That property is load-bearing: the training engine's
//! reproducibility guarantees rely on it, and `parallel_matches_sequential`
//! in the test suite checks it directly.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
/// Used by benchmarks and by tests that compare the two paths.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Whether work submitted right now would run on the rayon pool.
pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Split `data` into consecutive chunks of `chunk_len` and invoke
/// `f(chunk_index, chunk)` for each. The final chunk may be shorter.
pub fn chunks_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_active() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Invoke `f(i)` for `i` in `0..n`. The closure must not mutate shared
/// state; use it for side-effect-free per-index work feeding interior
/// mutability-free outputs (e.g. filling disjoint slots via `chunks_mut`
/// wrappers or collecting).
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        (0..n).into_par_iter().for_each(f);
        return;
    }
    (0..n).for_each(f);
}

/// Parallel map preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0usize; 10];
        chunks_mut(&mut v, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i + 1;
            }
        });
        assert_eq!(v, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(5, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
    }
}
