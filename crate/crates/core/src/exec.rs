//! Execution strategy for the data-parallel inner loops (rollout
//! collection, batch evaluation).
//!
//! Work items are pure functions of per-item seeds and results are merged
//! in input order, so both strategies produce bit-identical output. With
//! the `parallel` feature disabled everything degrades to the sequential
//! path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Execution::Parallel
    }

    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Execution::Sequential
    }
}

/// Maps `f` over `items` with the item index, preserving order.
pub fn map_indexed<T, U, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<U, E> + Sync,
{
    match exec {
        Execution::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect(),
    }
}
