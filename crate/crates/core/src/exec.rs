//! Member-wise execution helpers.
//!
//! Every data-parallel loop in the crate funnels through these functions. With
//! the `parallel` feature they dispatch to rayon; without it (or when called
//! through the `_seq` variants) they run on the calling thread. Results never
//! depend on which path ran: each item is computed from its index alone.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fills consecutive `chunk`-sized pieces of `out`, passing the chunk index.
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        fill_chunks_seq(out, chunk, f)
    }
}

pub fn fill_chunks_seq<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    if chunk == 0 {
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
