//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers run on the rayon pool
//! unless [`set_sequential`] has been switched on at runtime. Results are
//! always returned in index order so reductions stay bit-identical across
//! both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the sequential path even when the `parallel` feature is enabled.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

// Below this many items the rayon split overhead dominates.
#[cfg(feature = "parallel")]
const MIN_PAR_LEN: usize = 64;

/// `(0..len).map(f).collect()`, possibly in parallel.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    if is_parallel() && len >= MIN_PAR_LEN {
        (0..len).into_par_iter().with_min_len(MIN_PAR_LEN / 4).map(f).collect()
    } else {
        (0..len).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

/// Like [`map_range`] but without the small-length cutoff; meant for coarse
/// work items (trials, strategy enumerations).
#[cfg(feature = "parallel")]
pub fn map_coarse<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    if is_parallel() && len > 1 {
        (0..len).into_par_iter().map(f).collect()
    } else {
        (0..len).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_coarse<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

/// Fallible [`map_range`]; the first error in index order is returned.
pub fn try_map_range<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Send + Sync,
{
    map_range(len, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_range(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        let c = map_coarse(7, |i| i);
        assert_eq!(c, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> =
            try_map_range(500, |i| if i % 100 == 99 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(99));
    }
}
