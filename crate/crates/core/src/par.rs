//! Order-preserving data parallelism.
//!
//! With the `parallel` feature the helpers fan out over rayon's current pool;
//! without it they run sequentially. Results always come back in input order
//! and reductions are performed over fixed-size chunks in a fixed order, so
//! both builds produce bit-identical numbers.

/// Rows per chunk for sharded evaluation and chunked reductions.
pub const CHUNK_ROWS: usize = 512;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// `map` over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

/// Splits `0..n` into consecutive `[start, end)` chunks of at most `size`.
pub fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size))
        .map(|c| (c * size, ((c + 1) * size).min(n)))
        .collect()
}

/// Sum of `f(start, end)` over fixed chunks of `0..n`, added left to right.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    map(&chunks(n, CHUNK_ROWS), |&(s, e)| f(s, e)).into_iter().sum()
}
