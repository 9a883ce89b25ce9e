//! Gridded weather states, variable registry, normalization and region
//! selection.
//!
//! A state is a dense `n_lat x n_lon x |V|` array stored row-major in
//! `(lat, lon, variable)` order. Longitude wraps periodically, latitude does
//! not. Every model-facing computation works on normalized values; raw units
//! only appear in loss evaluation and reporting.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub name: String,
    pub units: String,
}

/// Regular latitude/longitude grid with an ordered variable list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub variables: Vec<VariableInfo>,
}

pub const U_WIND: &str = "u-wind";
pub const V_WIND: &str = "v-wind";
pub const TEMPERATURE: &str = "temperature";
pub const PRECIPITATION: &str = "precipitation";
pub const PRESSURE: &str = "pressure";

impl GridSpec {
    pub fn new(n_lat: usize, n_lon: usize, variables: Vec<VariableInfo>) -> Result<Self> {
        if n_lat < 4 || n_lon < 4 {
            return Err(Error::InvalidParameter(format!("grid must be at least 4x4, got {n_lat}x{n_lon}")));
        }
        if variables.is_empty() {
            return Err(Error::InvalidParameter("empty variable list".into()));
        }
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::InvalidParameter(format!("duplicate variable name `{}`", v.name)));
            }
        }
        Ok(Self { n_lat, n_lon, variables })
    }

    /// The 16x32 five-variable desk-scale grid.
    pub fn desk_scale() -> Self {
        Self::with_default_variables(16, 32).expect("valid default grid")
    }

    pub fn with_default_variables(n_lat: usize, n_lon: usize) -> Result<Self> {
        let vars = [
            (U_WIND, "m/s"),
            (V_WIND, "m/s"),
            (TEMPERATURE, "K"),
            (PRECIPITATION, "mm"),
            (PRESSURE, "hPa"),
        ]
        .iter()
        .map(|(n, u)| VariableInfo {
            name: n.to_string(),
            units: u.to_string(),
        })
        .collect();
        Self::new(n_lat, n_lon, vars)
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_lat, self.n_lon, self.n_vars())
    }

    /// Latitude of a row's cell center, rows spanning [-90, 90].
    pub fn lat_of(&self, row: usize) -> f64 {
        -90.0 + (row as f64 + 0.5) * 180.0 / self.n_lat as f64
    }

    /// Longitude of a column's cell center; column 0 sits on -180 and the
    /// ring wraps at +180.
    pub fn lon_of(&self, col: usize) -> f64 {
        -180.0 + col as f64 * 360.0 / self.n_lon as f64
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn check_shape(&self, values: &ArrayView3<f64>) -> Result<()> {
        if values.dim() != self.shape() {
            return Err(shape_err(format!("{:?}", self.shape()), format!("{:?}", values.dim())));
        }
        Ok(())
    }

    pub fn zeros(&self) -> Array3<f64> {
        Array3::zeros(self.shape())
    }
}

/// A normalized weather state at an integer time step.
#[derive(Clone, Debug)]
pub struct WeatherState {
    pub spec: Arc<GridSpec>,
    pub values: Array3<f64>,
    pub time_index: i64,
}

impl WeatherState {
    pub fn new(spec: Arc<GridSpec>, values: Array3<f64>, time_index: i64) -> Result<Self> {
        spec.check_shape(&values.view())?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalBlowup("non-finite state value".into()));
        }
        Ok(Self { spec, values, time_index })
    }
}

/// Per-variable mean and standard deviation of raw data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl VariableStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(shape_err(mean.len(), std.len()));
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("variable std must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    /// Pooled mean and population std per variable over a set of raw fields.
    pub fn fit<'a>(fields: impl IntoIterator<Item = ArrayView3<'a, f64>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut shift: Vec<f64> = Vec::new();
        for f in fields {
            let nv = f.dim().2;
            if sum.is_empty() {
                sum = vec![0.0; nv];
                sum_sq = vec![0.0; nv];
                // shifted sums keep the variance well conditioned for offsets like 1010 hPa
                shift = (0..nv).map(|v| f[[0, 0, v]]).collect();
            } else if sum.len() != nv {
                return Err(shape_err(sum.len(), nv));
            }
            for lane in f.lanes(Axis(2)) {
                for (v, x) in lane.iter().enumerate() {
                    let d = x - shift[v];
                    sum[v] += d;
                    sum_sq[v] += d * d;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData("no fields to fit statistics".into()));
        }
        let n = count as f64;
        let mean = sum.iter().zip(&shift).map(|(s, c)| s / n + c).collect();
        let std = sum
            .iter()
            .zip(&sum_sq)
            .map(|(s, q)| (q / n - (s / n) * (s / n)).max(0.0).sqrt())
            .collect();
        Self::new(mean, std)
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, values: &ArrayView3<f64>) -> Result<()> {
        if values.dim().2 != self.n_vars() {
            return Err(shape_err(self.n_vars(), values.dim().2));
        }
        Ok(())
    }

    pub fn normalize_values(&self, raw: &ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check(raw)?;
        let mut out = raw.to_owned();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (v, x) in lane.iter_mut().enumerate() {
                *x = (*x - self.mean[v]) / self.std[v];
            }
        }
        Ok(out)
    }

    pub fn denormalize_values(&self, normalized: &ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check(normalized)?;
        let mut out = normalized.to_owned();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (v, x) in lane.iter_mut().enumerate() {
                *x = *x * self.std[v] + self.mean[v];
            }
        }
        Ok(out)
    }
}

pub fn normalize(spec: Arc<GridSpec>, raw: &Array3<f64>, stats: &VariableStats, time_index: i64) -> Result<WeatherState> {
    spec.check_shape(&raw.view())?;
    let values = stats.normalize_values(&raw.view())?;
    WeatherState::new(spec, values, time_index)
}

pub fn denormalize(state: &WeatherState, stats: &VariableStats) -> Result<Array3<f64>> {
    stats.denormalize_values(&state.values.view())
}

/// Boolean selection over grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    pub cells: Array2<bool>,
    count: usize,
}

impl SpatialMask {
    pub fn from_cells(cells: Array2<bool>) -> Result<Self> {
        let count = cells.iter().filter(|c| **c).count();
        if count == 0 {
            return Err(Error::EmptyRegion);
        }
        Ok(Self { cells, count })
    }

    pub fn single(spec: &GridSpec, row: usize, col: usize) -> Result<Self> {
        if row >= spec.n_lat || col >= spec.n_lon {
            return Err(Error::EmptyRegion);
        }
        let mut cells = Array2::from_elem((spec.n_lat, spec.n_lon), false);
        cells[[row, col]] = true;
        Self::from_cells(cells)
    }

    pub fn full(spec: &GridSpec) -> Self {
        Self::from_cells(Array2::from_elem((spec.n_lat, spec.n_lon), true)).expect("full mask is nonempty")
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cells.dim()
    }

    /// Selected `(row, col)` pairs in row-major order.
    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.cells.indexed_iter().filter(|(_, c)| **c).map(|(i, _)| i).collect()
    }
}

/// Closed degree interval. For longitudes `lo > hi` denotes a range that
/// wraps through the antimeridian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeRange {
    pub lo: f64,
    pub hi: f64,
}

impl DegreeRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }
}

fn wrap_lon(x: f64) -> f64 {
    let y = (x + 180.0).rem_euclid(360.0) - 180.0;
    if y == -180.0 && x > 0.0 {
        180.0
    } else {
        y
    }
}

fn lon_in_range(lon: f64, range: DegreeRange) -> bool {
    if range.hi - range.lo >= 360.0 {
        return true;
    }
    let (lo, hi) = (wrap_lon(range.lo), wrap_lon(range.hi));
    let lon = wrap_lon(lon);
    if lo <= hi {
        lo <= lon && lon <= hi
    } else {
        lon >= lo || lon <= hi
    }
}

/// Cells whose centers lie in both closed intervals.
pub fn region_mask(spec: &GridSpec, lat: DegreeRange, lon: DegreeRange) -> Result<SpatialMask> {
    if lat.lo > lat.hi {
        return Err(Error::EmptyRegion);
    }
    let cells = Array2::from_shape_fn((spec.n_lat, spec.n_lon), |(r, c)| {
        let la = spec.lat_of(r);
        lat.lo <= la && la <= lat.hi && lon_in_range(spec.lon_of(c), lon)
    });
    SpatialMask::from_cells(cells)
}

/// A scalar per-cell quantity extracted from a raw state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    Variable(usize),
    WindSpeed { u: usize, v: usize },
}

impl Quantity {
    pub fn wind(spec: &GridSpec) -> Result<Self> {
        Ok(Self::WindSpeed {
            u: spec.var_index(U_WIND)?,
            v: spec.var_index(V_WIND)?,
        })
    }

    pub fn named(spec: &GridSpec, name: &str) -> Result<Self> {
        if name == "wind-speed" {
            Self::wind(spec)
        } else {
            Ok(Self::Variable(spec.var_index(name)?))
        }
    }

    pub fn check(&self, n_vars: usize) -> Result<()> {
        let ok = match *self {
            Quantity::Variable(i) => i < n_vars,
            Quantity::WindSpeed { u, v } => u < n_vars && v < n_vars,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownVariable(format!("{self:?}")))
        }
    }

    pub fn at(&self, raw: &ArrayView3<f64>, r: usize, c: usize) -> f64 {
        match *self {
            Quantity::Variable(i) => raw[[r, c, i]],
            Quantity::WindSpeed { u, v } => raw[[r, c, u]].hypot(raw[[r, c, v]]),
        }
    }

    pub fn field(&self, raw: &ArrayView3<f64>) -> Result<Array2<f64>> {
        self.check(raw.dim().2)?;
        let (nl, nc, _) = raw.dim();
        Ok(Array2::from_shape_fn((nl, nc), |(r, c)| self.at(raw, r, c)))
    }
}

/// Elementwise wind speed of a raw field.
pub fn wind_speed(raw: &ArrayView3<f64>, u_var: usize, v_var: usize) -> Result<Array2<f64>> {
    Quantity::WindSpeed { u: u_var, v: v_var }.field(raw)
}
