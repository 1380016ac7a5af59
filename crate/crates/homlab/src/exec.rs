//! Sample-level execution: data-parallel over independent realizations with
//! rayon when the `parallel` feature is active, sequential otherwise. Results
//! come back in index order either way, so every downstream reduction is
//! scheduling-independent.

/// Map a function over sample indices, collecting results in order.
#[cfg(feature = "parallel")]
pub fn map_samples<T: Send>(count: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_samples<T>(count: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    map_samples_serial(count, f)
}

/// Always-sequential path, kept compiled for benchmarking against rayon.
pub fn map_samples_serial<T>(count: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_by_index() {
        let out = map_samples(16, |i| i * i);
        let serial = map_samples_serial(16, |i| i * i);
        assert_eq!(out, serial);
    }
}
