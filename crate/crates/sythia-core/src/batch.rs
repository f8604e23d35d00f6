//! Order-preserving batch execution. With the `parallel` feature (default)
//! batches fan out over a rayon pool capped at `limit` workers; without it,
//! or when `limit <= 1`, items run sequentially in order. Output order always
//! matches input order either way.

/// Apply `f` to every item, preserving order.
#[cfg(feature = "parallel")]
pub fn run_batch<T, U, F>(items: Vec<T>, limit: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;

    if limit <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit)
        .build()
        .expect("worker pool");
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// Apply `f` to every item, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn run_batch<T, U, F>(items: Vec<T>, _limit: usize, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let out = run_batch((0..100).collect(), 8, |i: i32| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_when_limit_is_one() {
        let out = run_batch(vec![1, 2, 3], 1, |i: i32| i + 1);
        assert_eq!(out, vec![2, 3, 4]);
    }
}
