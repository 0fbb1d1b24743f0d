//! Ordered fan-out over fixed-size chunks. The chunk boundaries never depend
//! on the thread count, and results come back in chunk order, so any
//! reduction over them is bitwise reproducible.

use crate::Result;

/// Windows per gradient/evaluation shard.
pub(crate) const CHUNK: usize = 8;

#[cfg(feature = "parallel")]
fn pool() -> Option<&'static rayon::ThreadPool> {
    use std::sync::OnceLock;
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("CHANORM_THREADS").ok()?.trim().parse::<usize>().ok()?;
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().ok()
    })
    .as_ref()
}

/// Applies `f(start, end)` to consecutive ranges of `n` items and returns
/// the results in range order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync + Send,
{
    let ranges: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || ranges.par_iter().map(|&(s, e)| f(s, e)).collect::<Result<Vec<T>>>();
        match pool() {
            Some(p) => p.install(run),
            None => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.iter().map(|&(s, e)| f(s, e)).collect()
    }
}
