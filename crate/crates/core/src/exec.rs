//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks and reductions are combined in chunk
//! order, so results do not depend on the number of threads or on whether the
//! `parallel` feature is enabled.

/// How per-particle and per-task work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this build will actually run work on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two slices split at the same chunk boundaries
/// (`a` in chunks of `chunk_a`, `b` in chunks of `chunk_b`).
pub fn for_each_chunk_pair_mut<T, U, F>(exec: Execution, a: &mut [T], chunk_a: usize, b: &mut [U], chunk_b: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
{
    let (chunk_a, chunk_b) = (chunk_a.max(1), chunk_b.max(1));
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        a.par_chunks_mut(chunk_a).zip(b.par_chunks_mut(chunk_b)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    let _ = exec;
    a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
}

/// `(0..n).map(f).collect()`, in index order.
pub fn map<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Sums `f(i)` (each a vector of length `width`) over `0..n`.
///
/// Partial sums are formed over fixed blocks of `block` indices and then added
/// in block order.
pub fn sum_vectors<F>(exec: Execution, n: usize, width: usize, block: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let block = block.max(1);
    let blocks = n.div_ceil(block);
    let partial = map(exec, blocks, |b| {
        let mut acc = vec![0.0; width];
        for i in b * block..((b + 1) * block).min(n) {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
