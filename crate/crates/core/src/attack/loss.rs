//! Adversarial objectives `A = V(S(X))`, evaluated in raw units.
//!
//! The attack minimises `A`. Soft reductions use the softmax-weighted
//! average `sum_i p_i x_i` with `p = softmax(-x / tau)` (min) or
//! `softmax(x / tau)` (max); at ties this is the plain mean and its gradient
//! is spread evenly over the tied cells. Hard reductions pick the first
//! extremal cell in row-major order. Wind speed at `u = v = 0` uses the
//! zero subgradient.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{Quantity, SpatialMask, VariableStats};

/// Default soft-min / soft-max temperature in raw units.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Functional {
    /// `-min` over the region; raising the weakest value (fabricate wind).
    NegateMin { quantity: Quantity },
    /// `-max` over the region. The climatological reference is constant in
    /// the state, so maximising the deviation maximises the value.
    NegateMaxDeviation { quantity: Quantity },
    /// `max` over the region (conceal an event).
    MinimizeMax { quantity: Quantity },
    /// Mean over the region.
    MinimizeRegionMean { quantity: Quantity },
    /// `sign * mean` over the region; with a single-cell mask this pushes one
    /// location down (`sign = 1`) or up (`sign = -1`).
    TargetValue { quantity: Quantity, sign: f64 },
}

impl Functional {
    pub fn quantity(&self) -> Quantity {
        match *self {
            Functional::NegateMin { quantity }
            | Functional::NegateMaxDeviation { quantity }
            | Functional::MinimizeMax { quantity }
            | Functional::MinimizeRegionMean { quantity }
            | Functional::TargetValue { quantity, .. } => quantity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    Hard,
    Soft { tau: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub weight: f64,
    pub mask: SpatialMask,
    pub functional: Functional,
}

/// Weighted sum of region functionals.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLoss {
    pub terms: Vec<LossTerm>,
}

/// Value and gradient of a reduction over `x`.
fn reduce_min(x: &[f64], mode: Smoothing) -> (f64, Vec<f64>) {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let (m, g) = reduce_max(&neg, mode);
    (-m, g)
}

fn reduce_max(x: &[f64], mode: Smoothing) -> (f64, Vec<f64>) {
    match mode {
        Smoothing::Hard => {
            let mut best = 0;
            for (i, v) in x.iter().enumerate() {
                if *v > x[best] {
                    best = i;
                }
            }
            let mut g = vec![0.0; x.len()];
            g[best] = 1.0;
            (x[best], g)
        }
        Smoothing::Soft { tau } => {
            let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = x.iter().map(|v| ((v - top) / tau).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / z).collect();
            let m: f64 = p.iter().zip(x).map(|(p, v)| p * v).sum();
            let g = p.iter().zip(x).map(|(p, v)| p * (1.0 + (v - m) / tau)).collect();
            (m, g)
        }
    }
}

fn reduce_mean(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    (x.iter().sum::<f64>() / n, vec![1.0 / n; x.len()])
}

impl AdversarialLoss {
    pub fn single(mask: SpatialMask, functional: Functional) -> Self {
        Self {
            terms: vec![LossTerm {
                weight: 1.0,
                mask,
                functional,
            }],
        }
    }

    pub fn validate(&self, n_vars: usize, grid: (usize, usize)) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::EmptyRegion);
        }
        for t in &self.terms {
            if t.mask.count() == 0 {
                return Err(Error::EmptyRegion);
            }
            if t.mask.dim() != grid {
                return Err(shape_err(format!("{grid:?}"), format!("{:?}", t.mask.dim())));
            }
            t.functional.quantity().check(n_vars)?;
            if !t.weight.is_finite() {
                return Err(Error::InvalidParameter("loss weight must be finite".into()));
            }
        }
        Ok(())
    }

    /// `A` of a normalized state.
    pub fn eval(&self, state: &ArrayView3<f64>, stats: &VariableStats, mode: Smoothing) -> Result<f64> {
        Ok(self.value_and_grad(state, stats, mode)?.0)
    }

    /// `A` and its gradient w.r.t. the normalized state.
    pub fn value_and_grad(&self, state: &ArrayView3<f64>, stats: &VariableStats, mode: Smoothing) -> Result<(f64, Array3<f64>)> {
        let (nl, nc, nv) = state.dim();
        self.validate(nv, (nl, nc))?;
        let raw = stats.denormalize_values(state)?;
        let mut grad = Array3::zeros(state.dim());
        let mut total = 0.0;
        for term in &self.terms {
            let q = term.functional.quantity();
            let cells = term.mask.indices();
            let x: Vec<f64> = cells.iter().map(|&(r, c)| q.at(&raw.view(), r, c)).collect();
            let (value, dx) = match term.functional {
                Functional::NegateMin { .. } => {
                    let (m, g) = reduce_min(&x, mode);
                    (-m, g.into_iter().map(|v| -v).collect())
                }
                Functional::NegateMaxDeviation { .. } => {
                    let (m, g) = reduce_max(&x, mode);
                    (-m, g.into_iter().map(|v| -v).collect())
                }
                Functional::MinimizeMax { .. } => reduce_max(&x, mode),
                Functional::MinimizeRegionMean { .. } => reduce_mean(&x),
                Functional::TargetValue { sign, .. } => {
                    let (m, g) = reduce_mean(&x);
                    (sign * m, g.into_iter().map(|v| sign * v).collect::<Vec<f64>>())
                }
            };
            total += term.weight * value;
            for (&(r, c), d) in cells.iter().zip(dx) {
                let d = term.weight * d;
                if d == 0.0 {
                    continue;
                }
                match q {
                    Quantity::Variable(i) => grad[[r, c, i]] += d * stats.std[i],
                    Quantity::WindSpeed { u, v } => {
                        let (a, b) = (raw[[r, c, u]], raw[[r, c, v]]);
                        let s = a.hypot(b);
                        if s > 0.0 {
                            grad[[r, c, u]] += d * a / s * stats.std[u];
                            grad[[r, c, v]] += d * b / s * stats.std[v];
                        }
                    }
                }
            }
        }
        Ok((total, grad))
    }
}
