use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::rng::derive_rng;

/// Wilson score interval for `correct` successes out of `n` at normal
/// quantile `z` (1.96 for 95%).
pub fn wilson(correct: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = correct as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub const Z95: f64 = 1.959963984540054;

/// Central binomial band: accuracies `[lo, hi]` such that a scorer that is
/// right with probability `p` on each of `n` instances lands inside with
/// probability at least `level`.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (f64, f64) {
    let b = Binomial::new(p, n as u64).expect("valid binomial");
    let tail = (1.0 - level) / 2.0;
    let lo = b.inverse_cdf(tail);
    let hi = b.inverse_cdf(1.0 - tail);
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

/// Percentile bootstrap interval of the mean of paired differences.
pub fn bootstrap_mean_ci(diffs: &[f64], resamples: usize, seed: u64, level: f64) -> (f64, f64) {
    if diffs.is_empty() {
        return (0.0, 0.0);
    }
    let mut rng = derive_rng(seed, "bootstrap", diffs.len() as u64);
    let n = diffs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

pub fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}
