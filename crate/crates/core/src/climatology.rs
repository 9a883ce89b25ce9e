//! Day-of-year climatology, extreme-deviation thresholds and background error.
//!
//! Percentiles use linear interpolation between order statistics: for sorted
//! `x_0 <= ... <= x_{n-1}` and `p` in `[0, 1]`, `h = (n - 1) p` and the value
//! is `x_floor(h) + (h - floor(h)) (x_ceil(h) - x_floor(h))`.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{GridSpec, Quantity, VariableStats};
use crate::synth::Trajectory;

/// Per-cell, per-day means over whole years, raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub period: usize,
    pub n_years: usize,
    /// `mean[day]` has shape `(lat, lon, variable)`.
    pub mean: Vec<Array3<f64>>,
    /// Mean wind speed per day for the spec's wind pair, if it has one.
    wind_speed: Option<(Quantity, Vec<Array2<f64>>)>,
}

fn check_years(years: &[Trajectory]) -> Result<usize> {
    if years.len() < 2 {
        return Err(Error::InsufficientData(format!("{} full years, need >= 2", years.len())));
    }
    let period = years[0].period;
    for y in years {
        if y.period != period || y.len() != period {
            return Err(Error::InsufficientData("every year must hold exactly one period".into()));
        }
    }
    Ok(period)
}

pub fn build_climatology(years: &[Trajectory]) -> Result<Climatology> {
    let period = check_years(years)?;
    let shape = years[0].frames[0].dim();
    let mut mean = vec![Array3::<f64>::zeros(shape); period];
    let wind = Quantity::wind(&years[0].spec).ok();
    let mut speed = vec![Array2::<f64>::zeros((shape.0, shape.1)); period];
    for y in years {
        for (i, f) in y.frames.iter().enumerate() {
            if f.dim() != shape {
                return Err(shape_err(format!("{shape:?}"), format!("{:?}", f.dim())));
            }
            let d = y.day_of_year(i);
            mean[d] += f;
            if let Some(q) = wind {
                speed[d] += &q.field(&f.view())?;
            }
        }
    }
    let n = years.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    speed.iter_mut().for_each(|m| *m /= n);
    Ok(Climatology {
        period,
        n_years: years.len(),
        mean,
        wind_speed: wind.map(|q| (q, speed)),
    })
}

impl Climatology {
    /// Expected value of `q` on `day`.
    pub fn field(&self, q: Quantity, day: usize) -> Result<Array2<f64>> {
        let m = &self.mean[day % self.period];
        q.check(m.dim().2)?;
        match q {
            Quantity::Variable(v) => Ok(m.index_axis(Axis(2), v).to_owned()),
            Quantity::WindSpeed { .. } => match &self.wind_speed {
                Some((w, s)) if *w == q => Ok(s[day % self.period].clone()),
                _ => Err(Error::UnknownVariable(format!("no climatology for {q:?}"))),
            },
        }
    }
}

/// Linear-interpolation percentile, `p` in `[0, 1]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub const EXTREME_PERCENTILE: f64 = 0.99;

/// Per cell: the 99th percentile over years of each year's maximum
/// `|q - climatology|`.
pub fn extreme_threshold_map(years: &[Trajectory], clim: &Climatology, q: Quantity) -> Result<Array2<f64>> {
    check_years(years)?;
    let shape = years[0].frames[0].dim();
    let mut maxima = vec![Array2::<f64>::zeros((shape.0, shape.1)); years.len()];
    for (y, mx) in years.iter().zip(maxima.iter_mut()) {
        for (i, f) in y.frames.iter().enumerate() {
            let dev = q.field(&f.view())? - clim.field(q, y.day_of_year(i))?;
            ndarray::Zip::from(&mut *mx).and(&dev).for_each(|m, d| *m = m.max(d.abs()));
        }
    }
    let mut buf = vec![0.0; years.len()];
    Ok(Array2::from_shape_fn((shape.0, shape.1), |idx| {
        for (b, m) in buf.iter_mut().zip(&maxima) {
            *b = m[idx];
        }
        percentile(&buf, EXTREME_PERCENTILE)
    }))
}

/// Grid average of [`extreme_threshold_map`].
pub fn extreme_threshold(years: &[Trajectory], clim: &Climatology, q: Quantity) -> Result<f64> {
    let map = extreme_threshold_map(years, clim, q)?;
    Ok(map.mean().expect("nonempty grid"))
}

/// Named per-quantity thresholds in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeThresholds {
    pub entries: Vec<(String, f64)>,
}

impl ExtremeThresholds {
    pub fn compute(spec: &GridSpec, years: &[Trajectory], clim: &Climatology, names: &[&str]) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| {
                let q = Quantity::named(spec, n)?;
                let t = extreme_threshold(years, clim, q)?;
                if !(t > 0.0) {
                    return Err(Error::InsufficientData(format!("threshold for {n} is {t}")));
                }
                Ok((n.to_string(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }
}

/// Variance of one-step forecast error per variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundError {
    pub variance_normalized: Vec<f64>,
    pub variance_raw: Vec<f64>,
    pub n_forecasts: usize,
}

impl BackgroundError {
    /// Pooled population variance over cells and forecasts of normalized
    /// residuals `forecast - truth`.
    pub fn from_residuals<'a>(residuals: impl IntoIterator<Item = ArrayView3<'a, f64>>, stats: &VariableStats) -> Result<Self> {
        let nv = stats.n_vars();
        let mut sum = vec![0.0; nv];
        let mut sq = vec![0.0; nv];
        let mut count = 0usize;
        let mut n_forecasts = 0;
        for r in residuals {
            if r.dim().2 != nv {
                return Err(shape_err(nv, r.dim().2));
            }
            for lane in r.lanes(Axis(2)) {
                for (v, x) in lane.iter().enumerate() {
                    sum[v] += x;
                    sq[v] += x * x;
                }
                count += 1;
            }
            n_forecasts += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientData("no forecasts for background error".into()));
        }
        let n = count as f64;
        let variance_normalized: Vec<f64> = sum.iter().zip(&sq).map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0)).collect();
        if variance_normalized.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InsufficientData("background error variance is zero".into()));
        }
        let variance_raw = variance_normalized.iter().zip(&stats.std).map(|(v, s)| v * s * s).collect();
        Ok(Self {
            variance_normalized,
            variance_raw,
            n_forecasts,
        })
    }

    /// `sigma_b` per variable, normalized units.
    pub fn std_normalized(&self) -> Vec<f64> {
        self.variance_normalized.iter().map(|v| v.sqrt()).collect()
    }
}

/// Background error of `forecast` over consecutive normalized states: each
/// forecast from `(states[i], states[i + 1])` is compared with `states[i + 2]`,
/// for `i` stepping by `stride`.
pub fn estimate_background_error(
    states: &[Array3<f64>],
    stats: &VariableStats,
    stride: usize,
    mut forecast: impl FnMut(&ArrayView3<f64>, &ArrayView3<f64>) -> Result<Array3<f64>>,
) -> Result<BackgroundError> {
    if states.len() < 3 || stride == 0 {
        return Err(Error::InsufficientData("need >= 3 states and stride >= 1".into()));
    }
    let residuals = (0..states.len() - 2)
        .step_by(stride)
        .map(|i| Ok(forecast(&states[i].view(), &states[i + 1].view())? - &states[i + 2]))
        .collect::<Result<Vec<_>>>()?;
    BackgroundError::from_residuals(residuals.iter().map(|r| r.view()), stats)
}
