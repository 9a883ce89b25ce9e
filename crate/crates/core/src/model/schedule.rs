use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-uniform noise levels: `sigma(u) = sigma_max * (sigma_min / sigma_max)^u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Steps of the full sampler.
    pub n_full: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.02,
            sigma_max: 80.0,
            n_full: 20,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_full: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) || n_full == 0 {
            return Err(Error::InvalidParameter(format!(
                "need 0 < sigma_min < sigma_max and n_full >= 1, got ({sigma_min}, {sigma_max}, {n_full})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            n_full,
        })
    }

    pub fn sigma(&self, u: f64) -> f64 {
        if u == 0.0 {
            return self.sigma_max;
        }
        if u == 1.0 {
            return self.sigma_min;
        }
        self.sigma_max * (self.sigma_min / self.sigma_max).powf(u)
    }

    /// Inverse of [`sigma`](Self::sigma).
    pub fn position(&self, sigma: f64) -> f64 {
        (sigma / self.sigma_max).ln() / (self.sigma_min / self.sigma_max).ln()
    }

    /// Deterministic mid-quantile level `sigma((k + 0.5) / n)` of an `n`-step pass.
    pub fn mid_quantile(&self, k: usize, n: usize) -> f64 {
        self.sigma((k as f64 + 0.5) / n as f64)
    }

    /// The full sampler's levels, excluding the terminal zero.
    pub fn full_levels(&self) -> Vec<f64> {
        (0..self.n_full).map(|k| self.mid_quantile(k, self.n_full)).collect()
    }

    /// Level at quantile `a + (b - a) * unit` for a given `unit` in `[0, 1]`.
    pub fn sigma_at(&self, a: f64, b: f64, unit: f64) -> Result<f64> {
        check_interval(a, b)?;
        Ok(self.sigma(a + (b - a) * unit))
    }

    /// Draw from `Sigma(a, b)`: the level at a quantile uniform on `[a, b)`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, a: f64, b: f64, rng: &mut R) -> Result<f64> {
        check_interval(a, b)?;
        let unit: f64 = rng.random();
        Ok(self.sigma(a + (b - a) * unit))
    }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(0.0 <= a && a < b && b <= 1.0) {
        return Err(Error::BadInterval { a, b });
    }
    Ok(())
}

/// I.i.d. `N(0, sigma^2)` field of the given shape.
pub fn sample_noise<R: Rng + ?Sized>(shape: (usize, usize, usize), sigma: f64, rng: &mut R) -> Array3<f64> {
    assert!(sigma > 0.0, "noise level must be positive");
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    Array3::from_shape_simple_fn(shape, || normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sigma(0.0), 80.0);
        assert_eq!(s.sigma(1.0), 0.02);
        assert_eq!(s.sigma_at(0.0, 1e-12, 0.0).unwrap(), s.sigma_max);
        assert_eq!(s.sigma_at(0.0, 1.0, 1.0).unwrap(), s.sigma_min);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let x = s.sigma(i as f64 / 100.0);
            assert!(x < prev);
            prev = x;
        }
        assert!((s.position(s.sigma(0.37)) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn bad_intervals() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (a, b) in [(0.5, 0.5), (0.6, 0.5), (-0.1, 0.5), (0.0, 1.1)] {
            assert!(matches!(s.sample_sigma(a, b, &mut rng), Err(Error::BadInterval { .. })));
        }
        assert!(NoiseSchedule::new(1.0, 0.5, 10).is_err());
    }

    #[test]
    fn log_sigma_is_uniform_ks() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut u: Vec<f64> = (0..n).map(|_| s.position(s.sample_sigma(0.0, 1.0, &mut rng).unwrap())).collect();
        u.sort_by(f64::total_cmp);
        // KS distance against the uniform CDF of the quantile position (log sigma is affine in it)
        let d = u
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d < critical, "KS {d} >= {critical}");
    }

    #[test]
    fn noise_moments_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let sigma = 0.7;
        let x = sample_noise((50, 50, 40), sigma, &mut a);
        let y = sample_noise((50, 50, 40), sigma, &mut b);
        assert_eq!(x, y);
        let n = x.len() as f64;
        let m = x.sum() / n;
        let sd = (x.mapv(|v| (v - m) * (v - m)).sum() / n).sqrt();
        assert!(m.abs() < 0.01);
        assert!((sd / sigma - 1.0).abs() < 0.01);
    }
}
