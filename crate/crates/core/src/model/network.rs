//! The conditional denoiser and its exact reverse-mode derivatives.
//!
//! Per grid cell the network sees the 3x3 neighbourhood (periodic in
//! longitude, edge-clamped in latitude) of the previous state, the current
//! state and the scaled noisy estimate `c_in(sigma) * Z`, plus a 4-feature
//! noise embedding. Two tanh hidden layers feed a linear head whose output is
//! combined with the noisy input through the skip/output preconditioning:
//!
//! ```text
//! D(Z; sigma) = c_skip(sigma) * Z + c_out(sigma) * net(X_prev, X_cur, c_in(sigma) * Z, emb(sigma))
//! c_skip = sd^2 / (sigma^2 + sd^2)
//! c_out  = sigma * sd / sqrt(sigma^2 + sd^2)
//! c_in   = 1 / sqrt(sigma^2 + sd^2)
//! ```
//!
//! The first layer's contribution from the two conditioning states does not
//! depend on `Z` or `sigma`, so it is computed once per forecast step
//! ([`Conditioning`]) and reused across every denoising call of that step.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::schedule::NoiseSchedule;
use crate::error::{shape_err, Error, Result};

pub const STENCIL: usize = 9;
pub const EMBED: usize = 4;

/// Weights of the stencil network plus the constants it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub n_vars: usize,
    pub hidden: usize,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    /// `(27 |V| + 4) x H`: rows ordered (prev, cur, noisy) x stencil offset x variable, then embedding.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

pub fn c_skip(sigma: f64, sigma_data: f64) -> f64 {
    let sd2 = sigma_data * sigma_data;
    sd2 / (sigma * sigma + sd2)
}

pub fn c_out(sigma: f64, sigma_data: f64) -> f64 {
    sigma * sigma_data / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_in(sigma: f64, sigma_data: f64) -> f64 {
    1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

impl DenoiserParams {
    pub fn zeros(n_vars: usize, hidden: usize, schedule: NoiseSchedule) -> Self {
        let f = 3 * STENCIL * n_vars + EMBED;
        Self {
            n_vars,
            hidden,
            schedule,
            sigma_data: 1.0,
            w1: Array2::zeros((f, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((hidden, n_vars)),
            b3: Array1::zeros(n_vars),
        }
    }

    /// Gaussian fan-in initialisation with zero biases and a damped head.
    pub fn init<R: Rng + ?Sized>(n_vars: usize, hidden: usize, schedule: NoiseSchedule, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_vars, hidden, schedule);
        let mut fill = |w: &mut Array2<f64>, gain: f64| {
            let normal = Normal::new(0.0, gain / (w.nrows() as f64).sqrt()).expect("finite std");
            w.mapv_inplace(|_| normal.sample(rng));
        };
        fill(&mut p.w1, 1.0);
        fill(&mut p.w2, 1.0);
        fill(&mut p.w3, 0.1);
        p
    }

    pub fn n_features(&self) -> usize {
        3 * STENCIL * self.n_vars + EMBED
    }

    fn n_cond(&self) -> usize {
        2 * STENCIL * self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        let ok = self.w1.dim() == (self.n_features(), h)
            && self.b1.len() == h
            && self.w2.dim() == (h, h)
            && self.b2.len() == h
            && self.w3.dim() == (h, self.n_vars)
            && self.b3.len() == self.n_vars;
        if !ok {
            return Err(shape_err("consistent layer shapes", "mismatched layers"));
        }
        if self.flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalBlowup("non-finite weight".into()));
        }
        Ok(())
    }

    /// All parameters in serialization order: w1, b1, w2, b2, w3, b3.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v.extend(self.w3.iter());
        v.extend(self.b3.iter());
        v
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(shape_err(self.n_params(), values.len()));
        }
        let mut it = values.iter().copied();
        for x in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
        {
            *x = it.next().expect("length checked");
        }
        Ok(())
    }

    /// Mutable views of every tensor, in serialization order.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `log sigma`, its square, and sin/cos of the schedule position.
    pub fn embedding(&self, sigma: f64) -> [f64; EMBED] {
        let l = sigma.ln() / 4.0;
        let u = self.schedule.position(sigma);
        let a = std::f64::consts::PI * u;
        [l, l * l, a.sin(), a.cos()]
    }

    fn check_field(&self, x: &ArrayView3<f64>) -> Result<()> {
        if x.dim().2 != self.n_vars {
            return Err(shape_err(format!("{} variables", self.n_vars), x.dim().2));
        }
        Ok(())
    }

    /// First-layer pre-activation contributed by the conditioning states.
    pub fn condition(&self, x_prev: &ArrayView3<f64>, x_cur: &ArrayView3<f64>) -> Result<Conditioning> {
        self.check_field(x_prev)?;
        if x_prev.dim() != x_cur.dim() {
            return Err(shape_err(format!("{:?}", x_prev.dim()), format!("{:?}", x_cur.dim())));
        }
        let grid = (x_prev.dim().0, x_prev.dim().1);
        let cells = all_cells(grid);
        let sv = STENCIL * self.n_vars;
        let mut cols = Array2::zeros((cells.len(), 2 * sv));
        gather(&mut cols, 0, x_prev, 1.0, &cells, grid.1);
        gather(&mut cols, sv, x_cur, 1.0, &cells, grid.1);
        let mut pre = cols.dot(&self.w1.slice(s![..2 * sv, ..]));
        pre += &self.b1;
        Ok(Conditioning { pre, grid })
    }

    /// Denoised estimate for a conditioning, plus the activations needed by
    /// [`backward`](Self::backward).
    pub fn forward(&self, cond: &Conditioning, z: &ArrayView3<f64>, sigma: f64) -> Result<(Array3<f64>, Activations)> {
        self.check_field(z)?;
        if (z.dim().0, z.dim().1) != cond.grid {
            return Err(shape_err(format!("{:?}", cond.grid), format!("{:?}", z.dim())));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let grid = cond.grid;
        let cells = all_cells(grid);
        let sv = STENCIL * self.n_vars;
        let sd = self.sigma_data;
        let mut zcols = Array2::zeros((cells.len(), sv));
        gather(&mut zcols, 0, z, c_in(sigma, sd), &cells, grid.1);
        let nc = self.n_cond();
        let mut pre1 = zcols.dot(&self.w1.slice(s![nc..nc + sv, ..]));
        pre1 += &cond.pre;
        let emb = self.embedding(sigma);
        let mut emb_row = Array1::<f64>::zeros(self.hidden);
        for (k, e) in emb.iter().enumerate() {
            emb_row.scaled_add(*e, &self.w1.row(nc + sv + k));
        }
        pre1 += &emb_row;
        let h1 = pre1.mapv_into(f64::tanh);
        let mut pre2 = h1.dot(&self.w2);
        pre2 += &self.b2;
        let h2 = pre2.mapv_into(f64::tanh);
        let mut out = h2.dot(&self.w3);
        out += &self.b3;
        let (cs, co) = (c_skip(sigma, sd), c_out(sigma, sd));
        let zs = z.as_standard_layout();
        let zflat = zs.as_slice().expect("standard layout");
        let oflat = out.as_slice().expect("standard layout");
        let d =
            Array3::from_shape_vec(z.dim(), zflat.iter().zip(oflat).map(|(zi, oi)| cs * zi + co * oi).collect()).expect("matching sizes");
        Ok((d, Activations { h1, h2, sigma }))
    }

    /// Reverse pass of [`forward`](Self::forward): returns the gradient with
    /// respect to `Z` and accumulates the conditioning pre-activation gradient
    /// into `g_cond`.
    pub fn backward(&self, act: &Activations, cot: &ArrayView3<f64>, g_cond: &mut Array2<f64>) -> Result<Array3<f64>> {
        let (nl, nlon, nv) = cot.dim();
        if nv != self.n_vars || nl * nlon != act.h1.nrows() || g_cond.dim() != act.h1.dim() {
            return Err(shape_err(format!("{} cells", act.h1.nrows()), format!("{:?}", cot.dim())));
        }
        let sd = self.sigma_data;
        let sigma = act.sigma;
        let cots = cot.as_standard_layout();
        let cot2 = cots.view().into_shape_with_order((nl * nlon, nv)).expect("standard layout");
        let g_pre1 = self.hidden_backward(act, &cot2.mapv(|x| x * c_out(sigma, sd)));
        *g_cond += &g_pre1;
        let sv = STENCIL * self.n_vars;
        let nc = self.n_cond();
        let g_zcols = g_pre1.dot(&self.w1.slice(s![nc..nc + sv, ..]).t());
        let mut gz = cot.mapv(|x| x * c_skip(sigma, sd));
        scatter(&mut gz, &g_zcols, 0, c_in(sigma, sd), &all_cells((nl, nlon)), nlon);
        Ok(gz)
    }

    /// Gradient w.r.t. the two conditioning states from an accumulated
    /// pre-activation gradient.
    pub fn condition_backward(&self, cond: &Conditioning, g_cond: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
        let (nl, nlon) = cond.grid;
        let sv = STENCIL * self.n_vars;
        let g_cols = g_cond.dot(&self.w1.slice(s![..2 * sv, ..]).t());
        let cells = all_cells(cond.grid);
        let mut gp = Array3::zeros((nl, nlon, self.n_vars));
        let mut gc = Array3::zeros((nl, nlon, self.n_vars));
        scatter(&mut gp, &g_cols, 0, 1.0, &cells, nlon);
        scatter(&mut gc, &g_cols, sv, 1.0, &cells, nlon);
        (gp, gc)
    }

    /// Gradient of the pre-tanh first-layer activations given the gradient on the head output.
    fn hidden_backward(&self, act: &Activations, g_out: &Array2<f64>) -> Array2<f64> {
        let mut g2 = g_out.dot(&self.w3.t());
        ndarray::Zip::from(&mut g2).and(&act.h2).for_each(|g, h| *g *= 1.0 - h * h);
        let mut g1 = g2.dot(&self.w2.t());
        ndarray::Zip::from(&mut g1).and(&act.h1).for_each(|g, h| *g *= 1.0 - h * h);
        g1
    }

    /// Full first-layer input rows (conditioning, scaled noisy estimate,
    /// embedding) for a subset of cells.
    fn feature_rows(
        &self,
        x_prev: &ArrayView3<f64>,
        x_cur: &ArrayView3<f64>,
        z: &ArrayView3<f64>,
        sigma: f64,
        cells: &[usize],
    ) -> Array2<f64> {
        let sv = STENCIL * self.n_vars;
        let nlon = z.dim().1;
        let mut cols = Array2::zeros((cells.len(), self.n_features()));
        gather(&mut cols, 0, x_prev, 1.0, cells, nlon);
        gather(&mut cols, sv, x_cur, 1.0, cells, nlon);
        gather(&mut cols, 2 * sv, z, c_in(sigma, self.sigma_data), cells, nlon);
        let emb = self.embedding(sigma);
        for mut row in cols.rows_mut() {
            for (k, e) in emb.iter().enumerate() {
                row[3 * sv + k] = *e;
            }
        }
        cols
    }

    /// Denoised estimate on a subset of cells (rows ordered like `cells`),
    /// without the conditioning cache. Used for training.
    pub fn forward_cells(
        &self,
        x_prev: &ArrayView3<f64>,
        x_cur: &ArrayView3<f64>,
        z: &ArrayView3<f64>,
        sigma: f64,
        cells: &[usize],
    ) -> (Array2<f64>, CellActivations) {
        let cols = self.feature_rows(x_prev, x_cur, z, sigma, cells);
        let mut pre1 = cols.dot(&self.w1);
        pre1 += &self.b1;
        let h1 = pre1.mapv_into(f64::tanh);
        let mut pre2 = h1.dot(&self.w2);
        pre2 += &self.b2;
        let h2 = pre2.mapv_into(f64::tanh);
        let mut out = h2.dot(&self.w3);
        out += &self.b3;
        let sd = self.sigma_data;
        let (cs, co) = (c_skip(sigma, sd), c_out(sigma, sd));
        let nlon = z.dim().1;
        let mut d = out * co;
        for (mut row, &cell) in d.rows_mut().into_iter().zip(cells) {
            let (r, c) = (cell / nlon, cell % nlon);
            for v in 0..self.n_vars {
                row[v] += cs * z[[r, c, v]];
            }
        }
        (
            d,
            CellActivations {
                cols,
                act: Activations { h1, h2, sigma },
            },
        )
    }

    /// Parameter gradient of `<cot, forward_cells(...)>`.
    pub fn param_backward(&self, cache: &CellActivations, cot: &Array2<f64>) -> DenoiserParams {
        let act = &cache.act;
        let g_out = cot * c_out(act.sigma, self.sigma_data);
        let mut g = DenoiserParams::zeros(self.n_vars, self.hidden, self.schedule);
        g.sigma_data = self.sigma_data;
        g.w3 = act.h2.t().dot(&g_out);
        g.b3 = g_out.sum_axis(Axis(0));
        let mut g2 = g_out.dot(&self.w3.t());
        ndarray::Zip::from(&mut g2).and(&act.h2).for_each(|g, h| *g *= 1.0 - h * h);
        g.w2 = act.h1.t().dot(&g2);
        g.b2 = g2.sum_axis(Axis(0));
        let mut g1 = g2.dot(&self.w2.t());
        ndarray::Zip::from(&mut g1).and(&act.h1).for_each(|g, h| *g *= 1.0 - h * h);
        g.w1 = cache.cols.t().dot(&g1);
        g.b1 = g1.sum_axis(Axis(0));
        g
    }
}

/// Cached first-layer conditioning pre-activation, `cells x H` (bias included).
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub pre: Array2<f64>,
    pub grid: (usize, usize),
}

/// Hidden activations of one full-grid denoiser call.
#[derive(Clone, Debug)]
pub struct Activations {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct CellActivations {
    pub cols: Array2<f64>,
    pub act: Activations,
}

pub fn all_cells(grid: (usize, usize)) -> Vec<usize> {
    (0..grid.0 * grid.1).collect()
}

#[inline]
fn stencil_source(cell: usize, o: usize, nl: usize, nlon: usize) -> usize {
    let (r, c) = (cell / nlon, cell % nlon);
    let rr = (r as isize + o as isize / 3 - 1).clamp(0, nl as isize - 1) as usize;
    let cc = (c + nlon + o % 3 - 1) % nlon;
    rr * nlon + cc
}

/// Copy `scale *` 3x3 neighbourhoods of `field` into `out[:, col0..col0 + 9V]`.
fn gather(out: &mut Array2<f64>, col0: usize, field: &ArrayView3<f64>, scale: f64, cells: &[usize], nlon: usize) {
    let (nl, _, nv) = field.dim();
    let fs = field.as_standard_layout();
    let f = fs.as_slice().expect("standard layout");
    for (mut row, &cell) in out.rows_mut().into_iter().zip(cells) {
        let row = row.as_slice_mut().expect("row-major");
        for o in 0..STENCIL {
            let src = stencil_source(cell, o, nl, nlon) * nv;
            let dst = col0 + o * nv;
            for v in 0..nv {
                row[dst + v] = scale * f[src + v];
            }
        }
    }
}

/// Adjoint of [`gather`]: accumulate `scale * g[:, col0..col0 + 9V]` into `field`.
fn scatter(field: &mut Array3<f64>, g: &Array2<f64>, col0: usize, scale: f64, cells: &[usize], nlon: usize) {
    let (nl, _, nv) = field.dim();
    let f = field.as_slice_mut().expect("standard layout");
    for (row, &cell) in g.rows().into_iter().zip(cells) {
        let row = row.as_slice().expect("row-major");
        for o in 0..STENCIL {
            let dst = stencil_source(cell, o, nl, nlon) * nv;
            let src = col0 + o * nv;
            for v in 0..nv {
                f[dst + v] += scale * row[src + v];
            }
        }
    }
}

/// `D(X_prev, X_cur, Z; sigma)` on the full grid.
pub fn denoiser_forward(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    z: &ArrayView3<f64>,
    sigma: f64,
) -> Result<Array3<f64>> {
    let cond = params.condition(x_prev, x_cur)?;
    Ok(params.forward(&cond, z, sigma)?.0)
}

/// One Euler step `Z' = D + (sigma_next / sigma) (Z - D)`.
pub fn denoise_step(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    z: &ArrayView3<f64>,
    sigma: f64,
    sigma_next: f64,
) -> Result<Array3<f64>> {
    let cond = params.condition(x_prev, x_cur)?;
    step_with(params, &cond, z, sigma, sigma_next).map(|(z, _)| z)
}

/// [`denoise_step`] against a precomputed conditioning.
pub fn step_with(
    params: &DenoiserParams,
    cond: &Conditioning,
    z: &ArrayView3<f64>,
    sigma: f64,
    sigma_next: f64,
) -> Result<(Array3<f64>, Activations)> {
    if !(sigma_next >= 0.0 && sigma_next < sigma) {
        return Err(Error::BadNoiseOrder {
            cur: sigma,
            next: sigma_next,
        });
    }
    let (mut d, act) = params.forward(cond, z, sigma)?;
    if sigma_next > 0.0 {
        let ratio = sigma_next / sigma;
        ndarray::Zip::from(&mut d).and(z).for_each(|d, z| *d += ratio * (z - *d));
    }
    Ok((d, act))
}

/// Reverse pass of [`step_with`]: returns the gradient w.r.t. `Z` and
/// accumulates the conditioning gradient.
pub fn step_backward(
    params: &DenoiserParams,
    act: &Activations,
    sigma_next: f64,
    cot: &ArrayView3<f64>,
    g_cond: &mut Array2<f64>,
) -> Result<Array3<f64>> {
    let ratio = sigma_next / act.sigma;
    let g_d = cot.mapv(|x| (1.0 - ratio) * x);
    let mut gz = params.backward(act, &g_d.view(), g_cond)?;
    if ratio > 0.0 {
        gz.scaled_add(ratio, cot);
    }
    Ok(gz)
}

/// State-input gradients of `<cot, D(X_prev, X_cur, Z; sigma)>`.
pub fn denoiser_vjp(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    z: &ArrayView3<f64>,
    sigma: f64,
    cot: &ArrayView3<f64>,
) -> Result<(Array3<f64>, Array3<f64>, Array3<f64>)> {
    if cot.dim() != z.dim() {
        return Err(shape_err(format!("{:?}", z.dim()), format!("{:?}", cot.dim())));
    }
    let cond = params.condition(x_prev, x_cur)?;
    let (_, act) = params.forward(&cond, z, sigma)?;
    let mut g_cond = Array2::zeros(cond.pre.dim());
    let gz = params.backward(&act, cot, &mut g_cond)?;
    let (gp, gc) = params.condition_backward(&cond, &g_cond);
    Ok((gp, gc, gz))
}

/// Parameter gradient of `<cot, D(X_prev, X_cur, Z; sigma)>` over the full grid.
pub fn param_grad(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    z: &ArrayView3<f64>,
    sigma: f64,
    cot: &ArrayView3<f64>,
) -> Result<DenoiserParams> {
    if cot.dim() != z.dim() || z.dim() != x_prev.dim() || z.dim() != x_cur.dim() {
        return Err(shape_err(format!("{:?}", z.dim()), format!("{:?}", cot.dim())));
    }
    let (nl, nlon, nv) = z.dim();
    let cells = all_cells((nl, nlon));
    let (_, cache) = params.forward_cells(x_prev, x_cur, z, sigma, &cells);
    let cots = cot.as_standard_layout();
    let cot2 = cots
        .view()
        .into_shape_with_order((nl * nlon, nv))
        .expect("standard layout")
        .to_owned();
    Ok(params.param_backward(&cache, &cot2))
}
