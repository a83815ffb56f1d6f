//! Data-parallel helpers with a sequential fallback.
//!
//! Every batch loop in the engine (corpus scoring, embedding batches,
//! benchmark cases, per-ticket drafting) goes through [`map`]. With the
//! `parallel` feature enabled and [`ExecPolicy::Parallel`] selected the work
//! is spread over the rayon pool; otherwise it runs on the calling thread.
//! Output order always matches input order, so results are identical under
//! both policies.

use serde::{Deserialize, Serialize};

/// Runtime choice between the rayon pool and the calling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    /// True when work will actually be dispatched to the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy == ExecPolicy::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = policy;
    items.iter().map(f).collect()
}

/// Ordered map over a slice with the element index.
pub fn map_indexed<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy == ExecPolicy::Parallel {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = policy;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(ExecPolicy::Sequential, &xs, |x| x * x);
        let b = map(ExecPolicy::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
        let c = map_indexed(ExecPolicy::Parallel, &xs, |i, x| i as u64 + x);
        assert_eq!(c[10], 20);
    }
}
