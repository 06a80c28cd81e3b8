//! Log-space helpers shared by all samplers.

use rand::Rng;

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln Γ(x + n) - ln Γ(x)`, the log rising factorial.
#[inline]
pub fn ln_rising(x: f64, n: u32) -> f64 {
    if n == 0 {
        0.0
    } else {
        ln_gamma(x + n as f64) - ln_gamma(x)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log weights into probabilities.
pub fn normalize_log_weights(xs: &[f64]) -> Vec<f64> {
    let z = logsumexp(xs);
    xs.iter().map(|x| (x - z).exp()).collect()
}

/// Draws an index with probability proportional to `exp(log_weights[i])`.
///
/// Consumes exactly one uniform variate regardless of the weights.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    debug_assert!(!log_weights.is_empty());
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u: f64 = rng.random();
    if !max.is_finite() {
        // Degenerate weights: fall back to uniform over the finite maxima.
        return ((u * log_weights.len() as f64) as usize).min(log_weights.len() - 1);
    }
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let mut target = u * total;
    for (i, w) in log_weights.iter().enumerate() {
        let p = (w - max).exp();
        if target < p {
            return i;
        }
        target -= p;
    }
    // Rounding can leave a sliver of mass past the end.
    log_weights.iter().rposition(|w| w.is_finite()).unwrap_or(log_weights.len() - 1)
}

/// `n` points evenly spaced in log space over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((logsumexp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sampler_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[sample_log_weights(&w, &mut rng)] += 1;
        }
        assert!((counts[0] as f64 / 1e5 - 0.5).abs() < 0.01);
        assert!((counts[1] as f64 / 1e5 - 0.25).abs() < 0.01);
    }

    #[test]
    fn sampler_never_picks_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        for _ in 0..1000 {
            assert_eq!(sample_log_weights(&w, &mut rng), 1);
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(0.1, 10.0, 30);
        assert_eq!(g.len(), 30);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[29] - 10.0).abs() < 1e-9);
    }
}
