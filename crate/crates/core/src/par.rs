//! Data-parallel iteration helpers.
//!
//! With the `parallel` feature (the default) these fan work out over rayon;
//! without it they run sequentially with identical results. Both entry
//! points preserve input order, so callers that need bit-reproducible
//! reductions can fold the collected results in index order.
//!
//! The `seq` module is always compiled; benches use it as the baseline when
//! comparing backends.

use crate::error::Result;

/// Sequential reference implementations. Public so benchmarks can compare
/// the rayon path against a true single-threaded baseline in one run.
pub mod seq {
    use super::*;

    pub fn try_map_collect<T, R>(items: &[T], f: impl Fn(&T) -> Result<R>) -> Result<Vec<R>> {
        items.iter().map(f).collect()
    }

    /// Map every item to a partial accumulator and merge the parts. `merge`
    /// must be commutative and associative for the parallel backend to give
    /// the same answer.
    pub fn try_map_merge<T, A>(
        items: &[T],
        identity: impl Fn() -> A,
        f: impl Fn(&T) -> Result<A>,
        merge: impl Fn(A, A) -> A,
    ) -> Result<A> {
        let mut acc = identity();
        for item in items {
            acc = merge(acc, f(item)?);
        }
        Ok(acc)
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::*;
    use rayon::prelude::*;

    pub fn try_map_collect<T, R>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn try_map_merge<T, A>(
        items: &[T],
        identity: impl Fn() -> A + Sync + Send,
        f: impl Fn(&T) -> Result<A> + Sync + Send,
        merge: impl Fn(A, A) -> A + Sync + Send,
    ) -> Result<A>
    where
        T: Sync,
        A: Send,
    {
        items
            .par_iter()
            .map(&f)
            .try_reduce(&identity, |a, b| Ok(merge(a, b)))
    }
}

/// Map each item fallibly, collecting results in input order.
pub fn try_map_collect<T, R>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        par::try_map_collect(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::try_map_collect(items, f)
    }
}

/// Map each item to a partial accumulator and merge with a commutative,
/// associative `merge`.
pub fn try_map_merge<T, A>(
    items: &[T],
    identity: impl Fn() -> A + Sync + Send,
    f: impl Fn(&T) -> Result<A> + Sync + Send,
    merge: impl Fn(A, A) -> A + Sync + Send,
) -> Result<A>
where
    T: Sync,
    A: Send,
{
    #[cfg(feature = "parallel")]
    {
        par::try_map_merge(items, identity, f, merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::try_map_merge(items, identity, f, merge)
    }
}
