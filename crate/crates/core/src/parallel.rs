//! Data-parallel map over independent items.
//!
//! With the `parallel` feature, [`Parallelism::Threads`] runs on the rayon
//! pool; without it, every mode runs sequentially. Results always come back
//! in input order, so any reduction over them is independent of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Threads,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Threads
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    pub fn threads_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Applies `f` to every item, preserving order.
pub fn map<I, R, F>(mode: Parallelism, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Threads => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}
