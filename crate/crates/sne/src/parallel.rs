//! Data-parallel helpers. With the `parallel` feature the batch loops run on
//! rayon; without it (or with the runtime switch off) they run sequentially.
//! Each chunk owns disjoint output, so results are identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch, mainly for benchmarking the sequential path against the
/// rayon path in one process. No effect when the `parallel` feature is off.
pub fn set_parallel(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Apply `f(chunk_index, chunk)` over disjoint `chunk_size` chunks of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_size: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_size > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_size)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_size).enumerate() {
        f(i, c);
    }
}
