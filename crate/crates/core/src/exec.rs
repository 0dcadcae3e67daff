//! Data-parallel execution with a sequential fallback.
//!
//! Every Monte Carlo loop in this crate is split into fixed-size chunks, and
//! chunk `i` always draws from the same derived random stream. The two
//! execution modes therefore produce bit-identical output; `Parallel` only
//! changes which thread evaluates a chunk. Without the `parallel` feature,
//! `Parallel` silently runs sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of Monte Carlo draws handled by one chunk / one derived stream.
pub const CHUNK_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run work on a thread pool.
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Applies `f` to every index in `0..n` and returns the results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Runs `count` draws through `draw`, chunked so that chunk `i` owns the
    /// stream `(seed, i)`. Output order is the draw order.
    pub fn monte_carlo<T, F>(self, seed: u64, count: usize, draw: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut ChaCha8Rng) -> T + Sync + Send,
    {
        let chunks = count.div_ceil(CHUNK_SIZE);
        let parts = self.map_indexed(chunks, |chunk| {
            let mut rng = chunk_rng(seed, chunk as u64);
            let len = CHUNK_SIZE.min(count - chunk * CHUNK_SIZE);
            (0..len).map(|_| draw(&mut rng)).collect::<Vec<_>>()
        });
        let mut out = Vec::with_capacity(count);
        for part in parts {
            out.extend(part);
        }
        out
    }
}

/// Independent ChaCha stream for one chunk of work.
pub fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
