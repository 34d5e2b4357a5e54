//! Categorical and diagonal-Gaussian action distributions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Draws an index and returns it with its log-probability.
pub fn categorical_sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    // never return a zero-probability index from rounding at the tail
    while probs[index] == 0.0 && index > 0 {
        index -= 1;
    }
    (index, probs[index].ln())
}

pub fn categorical_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn clamp_log_sigma(log_sigma: f64) -> f64 {
    log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
}

/// Log-density of `value` under `N(mu, exp(log_sigma))`, with `log_sigma`
/// clamped.
pub fn gaussian_log_prob(value: f64, mu: f64, log_sigma: f64) -> f64 {
    let ls = clamp_log_sigma(log_sigma);
    let z = (value - mu) / ls.exp();
    -0.5 * z * z - ls - HALF_LN_2PI
}

pub fn gaussian_sample<R: Rng + ?Sized>(mu: f64, log_sigma: f64, rng: &mut R) -> (f64, f64) {
    let ls = clamp_log_sigma(log_sigma);
    let z: f64 = rng.sample(StandardNormal);
    let value = mu + ls.exp() * z;
    (value, gaussian_log_prob(value, mu, log_sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_logits() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, lp) = categorical_sample(&p, &mut rng);
        assert!((lp - (-std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn empirical_frequencies_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = [0.8, 0.2];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| categorical_sample(&probs, &mut rng).0 == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "{freq}");
    }

    #[test]
    fn entropy_values() {
        assert!((categorical_entropy(&[1.0 / 6.0; 6]) - 6f64.ln()).abs() < 1e-12);
        assert_eq!(categorical_entropy(&[0.0, 1.0, 0.0]), 0.0);
        // -(0.8 ln 0.8 + 0.2 ln 0.2)
        assert!((categorical_entropy(&[0.8, 0.2]) - 0.500_402_423_538_188_4).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_density_at_mean() {
        assert!((gaussian_log_prob(0.0, 0.0, 0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_samples_stay_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bound = 5.0 * (-5f64).exp();
        for _ in 0..10_000 {
            let (v, _) = gaussian_sample(3.0, -5.0, &mut rng);
            assert!((v - 3.0).abs() <= bound);
        }
        // clamp applies below the floor too
        for _ in 0..1000 {
            let (v, _) = gaussian_sample(3.0, -50.0, &mut rng);
            assert!((v - 3.0).abs() <= bound);
        }
    }

    #[test]
    fn sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_sample(1.0, 0.5f64.ln(), &mut rng).0)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.01, "{}", var.sqrt());
    }
}
