//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] fans work out
//! over the rayon pool; without it every call runs on the current thread.
//! Reductions always sum fixed-size chunks in index order so results are
//! bit-identical across execution modes and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items summed sequentially before chunk partials are combined.
pub const REDUCE_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel. Output order is by index.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps each index then folds results with `combine` in a deterministic
    /// chunked order. Returns `None` for `n == 0`.
    pub fn map_reduce<T, F, C>(self, n: usize, f: F, combine: C) -> Option<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
        C: Fn(&mut T, T) + Sync + Send,
    {
        let chunks = n.div_ceil(REDUCE_CHUNK);
        let partial = |c: usize| -> T {
            let start = c * REDUCE_CHUNK;
            let end = (start + REDUCE_CHUNK).min(n);
            let mut acc = f(start);
            for i in start + 1..end {
                combine(&mut acc, f(i));
            }
            acc
        };
        let partials = self.map(chunks, partial);
        let mut iter = partials.into_iter();
        let mut acc = iter.next()?;
        for p in iter {
            combine(&mut acc, p);
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let f = |i: usize| (i as f64 * 0.1).sin() * 1e-3 + 1.0 / (i as f64 + 3.0);
        let add = |a: &mut f64, b: f64| *a += b;
        let p = Execution::Parallel.map_reduce(103, f, add).unwrap();
        let s = Execution::Sequential.map_reduce(103, f, add).unwrap();
        assert_eq!(p.to_bits(), s.to_bits());
        assert_eq!(Execution::Parallel.map(10, |i| i * i), Execution::Sequential.map(10, |i| i * i));
        assert!(Execution::Sequential.map_reduce(0, f, add).is_none());
    }
}
