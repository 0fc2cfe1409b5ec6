use rayon::prelude::*;

/// Sums per-item contributions into a `len`-long accumulator using fixed
/// item chunks, then folds the chunk partials in order. The result is
/// bit-identical for any thread count.
pub(crate) fn chunked_sum<F>(items: usize, chunk: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let starts: Vec<usize> = (0..items).step_by(chunk.max(1)).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![0.0; len];
            for n in s..(s + chunk).min(items) {
                f(n, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    total
}
