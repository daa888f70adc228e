//! Order-stable parallel reductions.
//!
//! Sums are split into fixed-size chunks whose partial results are added in
//! index order, so the result does not depend on the number of threads.

use rayon::prelude::*;

const CHUNK: usize = 4096;

/// `Σ f(i)` for `i in 0..n`, bit-identical for any thread count.
pub fn stable_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Component-wise variant of [`stable_sum`].
pub fn stable_sum_n<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let partials: Vec<[f64; K]> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = [0.0; K];
            for i in c * CHUNK..end {
                let v = f(i);
                for k in 0..K {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; K];
    for p in &partials {
        for k in 0..K {
            total[k] += p[k];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_of_thread_count() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| stable_sum(100_003, f));
        let b = four.install(|| stable_sum(100_003, f));
        assert_eq!(a.to_bits(), b.to_bits());
        let c = four.install(|| stable_sum_n(100_003, |i| [f(i), 2.0 * f(i)]));
        assert_eq!(c[0].to_bits(), a.to_bits());
    }
}
