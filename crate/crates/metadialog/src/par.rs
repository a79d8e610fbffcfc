//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over a rayon pool; without it the same code runs sequentially. Results
//! are reduced in index order either way, so outputs are identical.

/// Applies `f` to every element and sums the results.
#[cfg(feature = "parallel")]
pub fn map_sum<T, F>(items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(usize, &T) -> f64 + Sync,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).sum()
}

#[cfg(not(feature = "parallel"))]
pub fn map_sum<T, F>(items: &[T], f: F) -> f64
where
    F: Fn(usize, &T) -> f64,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).sum()
}

/// Maps every element to an output vector, preserving order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_sum_adds_in_index_order() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let s = map_sum(&v, |i, x| x * (i as f64 + 1.0));
        assert!((s - (1.0 + 4.0 + 9.0 + 16.0)).abs() < 1e-12);
    }

    #[test]
    fn map_collect_preserves_order() {
        let v = [10, 20, 30];
        let out = map_collect(&v, |i, x| x + i as i32);
        assert_eq!(out, vec![10, 21, 32]);
    }
}
