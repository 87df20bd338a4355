//! Execution strategy for the data-parallel loops (trajectories, candidate
//! rollouts, evaluation tasks) and seed derivation for reproducible fan-out.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it every loop runs sequentially. Output order is always the input
//! order, so both strategies produce identical results.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel {
        /// Worker count; `0` means available parallelism.
        jobs: usize,
    },
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel { jobs: 0 }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Builds from a `--jobs` style knob; `1` forces sequential execution.
    pub fn with_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            return Execution::Sequential;
        }
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel { jobs }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }

    /// Strategy for loops nested inside a [`map`](Self::map) call: parallel
    /// work reuses the enclosing pool instead of building another.
    pub fn nested(self) -> Self {
        match self {
            Execution::Sequential => Execution::Sequential,
            #[cfg(feature = "parallel")]
            Execution::Parallel { .. } => Execution::Parallel { jobs: 0 },
        }
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel { jobs } => {
                use rayon::prelude::*;
                let run = || {
                    items
                        .par_iter()
                        .enumerate()
                        .map(|(i, t)| f(i, t))
                        .collect()
                };
                if jobs == 0 {
                    run()
                } else {
                    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                        Ok(pool) => pool.install(run),
                        Err(_) => run(),
                    }
                }
            }
        }
    }
}

/// Mixes a base seed with a path of indices (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &p in parts {
        state = splitmix(state ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a string identifier.
pub fn string_seed(s: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
