//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it (or
//! when sequential mode is forced at runtime) they run the same closures in
//! order. Every caller writes disjoint output slots, so results do not depend
//! on the schedule.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Environment variable holding the worker thread count. `1` selects the
/// strict single-threaded mode.
pub const THREADS_ENV: &str = "ANR_THREADS";

/// Force (or release) sequential execution at runtime.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::Relaxed) && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Read [`THREADS_ENV`] and configure the global pool. Returns the thread
/// count in effect.
pub fn init_from_env() -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1);
    if requested == Some(1) {
        set_sequential(true);
    }
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // The global pool can only be built once per process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        if FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
            1
        } else {
            rayon::current_num_threads()
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Run `f(chunk_index, chunk)` over `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0usize; 37];
        for_each_chunk_mut(&mut a, 5, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = i * 5 + j;
            }
        });
        assert_eq!(a, (0..37).collect::<Vec<_>>());
        assert_eq!(map_range(4, |i| i * i), vec![0, 1, 4, 9]);
    }
}
