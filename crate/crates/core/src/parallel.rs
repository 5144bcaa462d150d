//! Data-parallel primitives with a sequential fallback.
//!
//! The crate's hot loops (matrix products, Monte-Carlo perturbation trials,
//! per-neuron rank scans) all funnel through these two helpers. With the
//! default `parallel` feature they fan out over rayon; without it they run
//! sequentially with identical results. Work is always split so that each
//! output element is reduced in a fixed order, which keeps results bitwise
//! independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `chunk`-sized mutable slice of `data`, passing the chunk
/// index. Chunks are disjoint, so the closure runs without synchronization.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Configure the global thread pool from the `NETDYN_THREADS` environment
/// variable. A no-op without the `parallel` feature, when the variable is
/// unset, or once a pool already exists.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("NETDYN_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Which mode this build runs in; used by the bench suite to label results.
pub const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_mutation_covers_all_elements() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i + 1;
            }
        });
        assert_eq!(v, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }
}
