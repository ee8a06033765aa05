//! Data-parallel mapping over work units.
//!
//! The pipeline's hot loops (repeated sampling, judging, gating, answering)
//! are embarrassingly parallel across units. With the `parallel` feature
//! (default) `map_units` fans out on a dedicated rayon pool; without it, the
//! same call degrades to the sequential walk. Results come back in unit
//! order either way, so outputs cannot depend on scheduling.

/// Sequential reference path. Always available; also what `map_units`
/// becomes when the `parallel` feature is off.
pub fn map_units_seq<T, R, F>(units: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    units.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_units<T, R, F>(threads: usize, units: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use rayon::prelude::*;
    if threads <= 1 || units.len() <= 1 {
        return map_units_seq(units, f);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("rayon pool");
    pool.install(|| units.par_iter().map(|u| f(u)).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn map_units<T, R, F>(_threads: usize, units: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    map_units_seq(units, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_in_order() {
        let units: Vec<u64> = (0..500).collect();
        let f = |x: &u64| x * x + 1;
        let seq = map_units_seq(&units, f);
        let par = map_units(8, &units, f);
        assert_eq!(seq, par);
    }

    #[test]
    fn single_thread_request_works() {
        let units = vec![1u32, 2, 3];
        assert_eq!(map_units(1, &units, |x| x + 1), vec![2, 3, 4]);
    }
}
