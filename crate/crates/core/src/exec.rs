//! Execution strategy for the data-parallel inner loops.
//!
//! Every hot loop in the crate (ring vector arithmetic, share splitting,
//! batched forward/backward passes, evaluation, Monte Carlo sweeps) is
//! written against [`Execution`]. With the `parallel` feature enabled the
//! `Parallel` variant fans work out over rayon; without it, both variants
//! run the same sequential code. Work is always partitioned so that each
//! output element is produced by exactly one sequential computation, which
//! keeps results bit-identical across strategies and thread counts.

/// Below this many scalar operations a loop is not worth splitting.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// True when this strategy will actually fan out for `work` operations.
    pub fn splits(self, work: usize) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel && work >= MIN_PARALLEL_WORK
    }

    /// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
    ///
    /// `work_per_item` is the approximate cost of one element and only feeds
    /// the split/no-split decision.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, work_per_item: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        if self.splits(data.len().saturating_mul(work_per_item)) {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
                return;
            }
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Collects `f(i)` for `i in 0..len`, preserving order.
    pub fn map_indices<U, F>(self, len: usize, work_per_item: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        if self.splits(len.saturating_mul(work_per_item)) {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                return (0..len).into_par_iter().map(f).collect();
            }
        }
        (0..len).map(f).collect()
    }
}
