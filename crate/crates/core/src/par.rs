//! Order-stable data-parallel maps.
//!
//! Results always come back in input order, so output is identical for any
//! worker count. With the `parallel` feature disabled, or `workers == 1`,
//! the maps run sequentially on the calling thread.

use crate::error::{Error, Result};

/// Default worker count: the machine's available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 && items.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    items.iter().map(f).collect()
}

/// Like [`map_ordered`] but stops at the first error in input order.
pub fn try_map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    map_ordered(items, workers, f).into_iter().collect()
}

pub fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        Err(Error::Config("worker count must be at least 1".into()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_stable_across_worker_counts() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map_ordered(&items, 1, |x| x * x + 1);
        for w in [2, 3, 8] {
            assert_eq!(map_ordered(&items, w, |x| x * x + 1), seq);
        }
    }

    #[test]
    fn first_error_in_input_order() {
        let items: Vec<i32> = (0..100).collect();
        let r = try_map_ordered(&items, 4, |&x| {
            if x == 17 || x == 60 {
                Err(Error::Input(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert!(r.unwrap_err().to_string().contains("bad 17"));
        assert!(check_workers(0).is_err());
    }
}
