//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel loop in the crate goes through [`Parallelism::map_chunks`],
//! which hands out fixed, index-based chunks. Chunk results are returned in
//! index order, so output never depends on the worker count.

/// How to run the data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Plain loop on the calling thread.
    Sequential,
    /// Rayon, on whatever pool is current (see [`with_workers`]).
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Rayon,
}

impl Parallelism {
    /// `1` means sequential, anything else means rayon.
    pub fn from_workers(workers: usize) -> Self {
        if workers == 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Rayon
        }
    }

    /// Splits `0..n` into chunks of `chunk` indices, applies `f` to each
    /// chunk range, and returns the results in chunk order.
    pub fn map_chunks<T, F>(self, n: u64, chunk: u64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(std::ops::Range<u64>) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n_chunks = n.div_ceil(chunk);
        let range_of = |c: u64| (c * chunk)..((c + 1) * chunk).min(n);
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n_chunks)
                    .into_par_iter()
                    .map(|c| f(range_of(c)))
                    .collect()
            }
            _ => (0..n_chunks).map(|c| f(range_of(c))).collect(),
        }
    }

    /// Maps over a slice, preserving order.
    pub fn map_slice<A, T, F>(self, items: &[A], f: F) -> Vec<T>
    where
        A: Sync,
        T: Send,
        F: Fn(&A) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Runs `f` with `workers` threads available to [`Parallelism::Rayon`]
/// (`0` = all cores) and returns the parallelism to use inside it.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce(Parallelism) -> R + Send,
{
    let par = Parallelism::from_workers(workers);
    #[cfg(feature = "parallel")]
    {
        if par == Parallelism::Rayon {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("failed to build worker pool");
            return pool.install(|| f(par));
        }
    }
    f(par)
}
