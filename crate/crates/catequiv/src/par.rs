//! Order-preserving parallel map. Results are collected in input order and
//! reduced sequentially by callers, so outputs never depend on thread count;
//! without the `parallel` feature this is a plain iterator.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub(crate) fn try_map_indexed<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map_indexed<T, R>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R>,
) -> Result<Vec<R>> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
