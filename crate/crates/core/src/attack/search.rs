//! Smallest budget whose induced deviation reaches a threshold.

use crate::error::{Error, Result};

/// Linear interpolation of the budget at which `deviations` first reach
/// `threshold`. Past the last budget the last segment's slope is used, or the
/// slope from the first to the last point if that one is not positive.
pub fn crossing_budget(budgets: &[f64], deviations: &[f64], threshold: f64) -> Result<f64> {
    if budgets.len() < 2 || budgets.len() != deviations.len() {
        return Err(Error::InvalidParameter("need >= 2 budgets with one deviation each".into()));
    }
    if budgets.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter("budgets must be strictly increasing".into()));
    }
    if deviations[0] >= threshold {
        return Ok(budgets[0]);
    }
    for i in 1..budgets.len() {
        if deviations[i] >= threshold {
            let (b0, b1, d0, d1) = (budgets[i - 1], budgets[i], deviations[i - 1], deviations[i]);
            return Ok(b0 + (threshold - d0) * (b1 - b0) / (d1 - d0));
        }
    }
    let k = budgets.len() - 1;
    let last = (deviations[k] - deviations[k - 1]) / (budgets[k] - budgets[k - 1]);
    let overall = (deviations[k] - deviations[0]) / (budgets[k] - budgets[0]);
    let slope = if last > 0.0 { last } else { overall };
    if slope > 0.0 && slope.is_finite() {
        Ok(budgets[k] + (threshold - deviations[k]) / slope)
    } else {
        Err(Error::NoCrossing { threshold })
    }
}

/// Evaluate `deviation_at` on every budget, then interpolate the crossing.
pub fn min_budget_search(budgets: &[f64], threshold: f64, mut deviation_at: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<f64>)> {
    let devs = budgets.iter().map(|&b| deviation_at(b)).collect::<Result<Vec<_>>>()?;
    Ok((crossing_budget(budgets, &devs, threshold)?, devs))
}
