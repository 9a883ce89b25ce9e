//! Chi-square variance test against a known background variance.
//!
//! `P(a, x)` is evaluated by its power series when `x < a + 1` and `Q(a, x)`
//! by the modified-Lentz continued fraction otherwise; `ln Gamma` uses the
//! Lanczos approximation (g = 7, 9 terms).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::Perturbation;
use crate::error::{Error, Result};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;

fn prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * prefactor(a, x)
}

fn upper_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h * prefactor(a, x)
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        lower_series(a, x)
    } else {
        1.0 - upper_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

pub fn chi_square_cdf(x: f64, dof: f64) -> f64 {
    gamma_p(0.5 * dof, 0.5 * x)
}

pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    gamma_q(0.5 * dof, 0.5 * x)
}

/// `x` with `P(chi2_dof <= x) = p`, by bisection to machine precision.
pub fn chi_square_quantile(p: f64, dof: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && dof > 0.0, "quantile needs p in [0, 1) and dof > 0");
    if p == 0.0 {
        return 0.0;
    }
    let mut hi = dof.max(1.0);
    while chi_square_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi_square_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Upper-tail test of `T = (m - 1) s^2 / sigma_b^2` on `m - 1` degrees of freedom.
pub fn chi_square_test(sample: &[f64], sigma_b2: f64, alpha: f64) -> Result<ChiSquareTest> {
    let m = sample.len();
    if m < 2 {
        return Err(Error::DegenerateSample(m));
    }
    if !(sigma_b2 > 0.0) {
        return Err(Error::InvalidParameter("background variance must be positive".into()));
    }
    let n = m as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let ss = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let statistic = ss / sigma_b2;
    let p_value = chi_square_sf(statistic, n - 1.0).clamp(0.0, 1.0);
    Ok(ChiSquareTest {
        statistic,
        p_value,
        reject: p_value < alpha,
    })
}

/// Rejection probability when the residual variance is `sigma_b2 + epsilon^2`.
pub fn analytic_power(m: usize, sigma_b2: f64, epsilon: f64, alpha: f64) -> f64 {
    if epsilon == 0.0 {
        return alpha;
    }
    let dof = (m - 1) as f64;
    let c = chi_square_quantile(1.0 - alpha, dof);
    let r = (sigma_b2 + epsilon * epsilon) / sigma_b2;
    chi_square_sf(c / r, dof)
}

/// Fraction of `trials` synthetic contaminated samples the test rejects.
pub fn monte_carlo_power<R: Rng + ?Sized>(m: usize, sigma_b2: f64, epsilon: f64, alpha: f64, trials: usize, rng: &mut R) -> Result<f64> {
    let normal = Normal::new(0.0, (sigma_b2 + epsilon * epsilon).sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut buf = vec![0.0; m];
    let mut rejected = 0usize;
    for _ in 0..trials {
        buf.iter_mut().for_each(|x| *x = normal.sample(rng));
        if chi_square_test(&buf, sigma_b2, alpha)?.reject {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / trials as f64)
}

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub m: usize,
    pub alpha: f64,
    /// Background variance in the units of the residuals (1 in background-error units).
    pub sigma_b2: f64,
    /// RMS over variables and both fields of the per-variable perturbation std.
    pub epsilon: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub analytic_power: f64,
    /// `(power, trials)`.
    pub monte_carlo: Option<(f64, usize)>,
}

/// RMS of per-variable stds across both fields.
pub fn effective_epsilon(p: &Perturbation) -> f64 {
    let [a, b] = p.moments();
    let sds: Vec<f64> = a.iter().chain(&b).map(|(_, s)| *s).collect();
    (sds.iter().map(|s| s * s).sum::<f64>() / sds.len() as f64).sqrt()
}

/// Detection power for a perturbation in background-error units. The test
/// statistic is computed on one draw of unit background noise plus the
/// perturbation; `mc_trials` adds a Monte-Carlo power estimate.
pub fn detectability_of_attack<R: Rng + ?Sized>(
    p: &Perturbation,
    alpha: f64,
    mc_trials: Option<usize>,
    rng: &mut R,
) -> Result<DetectionReport> {
    let m = p.delta_t.len() + p.delta_tm1.len();
    let epsilon = effective_epsilon(p);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sample: Vec<f64> = p.delta_t.iter().chain(p.delta_tm1.iter()).map(|d| d + normal.sample(rng)).collect();
    let test = chi_square_test(&sample, 1.0, alpha)?;
    let monte_carlo = match mc_trials {
        Some(t) => Some((monte_carlo_power(m, 1.0, epsilon, alpha, t, rng)?, t)),
        None => None,
    };
    Ok(DetectionReport {
        m,
        alpha,
        sigma_b2: 1.0,
        epsilon,
        statistic: test.statistic,
        p_value: test.p_value,
        reject: test.reject,
        analytic_power: analytic_power(m, 1.0, epsilon, alpha),
        monte_carlo,
    })
}
