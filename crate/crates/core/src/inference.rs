//! Autoregressive forecasting: the full sampler, ensemble medians, and the
//! few-step approximate rollout with an exact reverse pass.
//!
//! Ensemble member `m` draws from `ChaCha8Rng::seed_from_u64(seed)` switched
//! to stream `m`, so members are independent, reproducible, and unaffected by
//! the ensemble size.

use std::hash::{Hash, Hasher};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::network::{step_backward, step_with, Activations, Conditioning, DenoiserParams};
use crate::model::schedule::sample_noise;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Lead-time steps `j`.
    pub lead_steps: usize,
    /// Steps of the full sampler.
    pub n_full: usize,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            lead_steps: 4,
            n_full: 20,
            ensemble_size: 5,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lead_steps == 0 || self.ensemble_size == 0 || self.n_full == 0 {
            return Err(Error::InvalidParameter("lead_steps, n_full and ensemble_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// RNG of ensemble member `member`.
pub fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

fn check_inputs(params: &DenoiserParams, x_prev: &ArrayView3<f64>, x_cur: &ArrayView3<f64>) -> Result<()> {
    if x_prev.dim() != x_cur.dim() {
        return Err(shape_err(format!("{:?}", x_prev.dim()), format!("{:?}", x_cur.dim())));
    }
    if x_cur.dim().2 != params.n_vars {
        return Err(shape_err(format!("{} variables", params.n_vars), x_cur.dim().2));
    }
    Ok(())
}

/// Noise levels of the full sampler: mid-quantiles of `n_full` intervals, then 0.
pub fn full_sigmas(params: &DenoiserParams, n_full: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n_full).map(|k| params.schedule.mid_quantile(k, n_full)).collect();
    s.push(0.0);
    s
}

/// Denoise from `N(0, sigma_0^2)` through `sigmas` (which end in 0).
fn sample_state<R: Rng + ?Sized>(
    params: &DenoiserParams,
    cond: &Conditioning,
    sigmas: &[f64],
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Result<Array3<f64>> {
    let mut z = sample_noise(shape, sigmas[0], rng);
    for w in sigmas.windows(2) {
        z = step_with(params, cond, &z.view(), w[0], w[1])?.0;
    }
    Ok(z)
}

/// Full-sampler rollout: `j` states after `x_cur`.
pub fn forecast_full<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    config: &ForecastConfig,
    rng: &mut R,
) -> Result<Vec<Array3<f64>>> {
    config.validate()?;
    check_inputs(params, x_prev, x_cur)?;
    let sigmas = full_sigmas(params, config.n_full);
    let mut prev = x_prev.to_owned();
    let mut cur = x_cur.to_owned();
    let mut out = Vec::with_capacity(config.lead_steps);
    for _ in 0..config.lead_steps {
        let cond = params.condition(&prev.view(), &cur.view())?;
        let next = sample_state(params, &cond, &sigmas, cur.dim(), rng)?;
        prev = std::mem::replace(&mut cur, next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Every member's rollout, in member order.
pub fn ensemble_members(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    config: &ForecastConfig,
) -> Result<Vec<Vec<Array3<f64>>>> {
    config.validate()?;
    (0..config.ensemble_size)
        .map(|m| forecast_full(params, x_prev, x_cur, config, &mut member_rng(config.seed, m)))
        .collect()
}

/// Elementwise median; the mean of the two middle values for even counts.
pub fn median_field(fields: &[&Array3<f64>]) -> Result<Array3<f64>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InsufficientData("median of zero members".into()))?;
    for f in fields {
        if f.dim() != first.dim() {
            return Err(shape_err(format!("{:?}", first.dim()), format!("{:?}", f.dim())));
        }
    }
    let n = fields.len();
    let mut buf = vec![0.0; n];
    let mut out = Array3::zeros(first.dim());
    for (idx, o) in out.indexed_iter_mut() {
        for (b, f) in buf.iter_mut().zip(fields) {
            *b = f[idx];
        }
        buf.sort_by(f64::total_cmp);
        *o = if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        };
    }
    Ok(out)
}

/// Per-lead-step elementwise median of member rollouts.
pub fn median_sequence(members: &[Vec<Array3<f64>>]) -> Result<Vec<Array3<f64>>> {
    let len = members.first().map_or(0, Vec::len);
    if members.iter().any(|m| m.len() != len) {
        return Err(Error::InvalidParameter("members have different lengths".into()));
    }
    (0..len)
        .map(|k| median_field(&members.iter().map(|m| &m[k]).collect::<Vec<_>>()))
        .collect()
}

pub fn forecast_ensemble(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    config: &ForecastConfig,
) -> Result<Vec<Array3<f64>>> {
    median_sequence(&ensemble_members(params, x_prev, x_cur, config)?)
}

/// How the approximate rollout picks its `n` noise levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSampling {
    /// Uniform quantile within each interval `(i/n, (i+1)/n)`.
    #[default]
    Uniform,
    /// The interval midpoint, matching the full sampler when `n = n_full`.
    MidQuantile,
}

/// One lead step of an approximate rollout.
#[derive(Clone, Debug)]
pub struct LeadRecord {
    pub cond: Conditioning,
    /// `sigma_0 > ... > sigma_{n-1} > 0`, terminal zero included.
    pub sigmas: Vec<f64>,
    pub initial_noise: Array3<f64>,
    pub acts: Vec<Activations>,
}

/// Everything needed to replay or differentiate one approximate rollout.
#[derive(Clone, Debug)]
pub struct UnrollTape {
    pub x_prev: Array3<f64>,
    pub x_cur: Array3<f64>,
    pub leads: Vec<LeadRecord>,
    pub output: Array3<f64>,
    params_fingerprint: u64,
}

impl UnrollTape {
    pub fn n_calls(&self) -> usize {
        self.leads.iter().map(|l| l.acts.len()).sum()
    }

    pub fn lead_steps(&self) -> usize {
        self.leads.len()
    }

    /// Re-run the forward pass from the recorded inputs, levels and noise.
    pub fn replay(&self, params: &DenoiserParams) -> Result<Array3<f64>> {
        self.check_params(params)?;
        let mut prev = self.x_prev.clone();
        let mut cur = self.x_cur.clone();
        for lead in &self.leads {
            let cond = params.condition(&prev.view(), &cur.view())?;
            let mut z = lead.initial_noise.clone();
            for w in lead.sigmas.windows(2) {
                z = step_with(params, &cond, &z.view(), w[0], w[1])?.0;
            }
            prev = std::mem::replace(&mut cur, z);
        }
        Ok(cur)
    }

    fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        if fingerprint(params) != self.params_fingerprint {
            return Err(Error::TapeMismatch("parameters differ from the recorded pass".into()));
        }
        Ok(())
    }
}

fn fingerprint(params: &DenoiserParams) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (params.n_vars, params.hidden, params.sigma_data.to_bits()).hash(&mut h);
    for x in params.flat() {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Levels of one `n`-step pass, terminal zero included.
pub fn approx_sigmas<R: Rng + ?Sized>(params: &DenoiserParams, n: usize, sampling: SigmaSampling, rng: &mut R) -> Result<Vec<f64>> {
    let nf = n as f64;
    let mut s = (0..n)
        .map(|i| match sampling {
            SigmaSampling::Uniform => params.schedule.sample_sigma(i as f64 / nf, (i + 1) as f64 / nf, rng),
            SigmaSampling::MidQuantile => Ok(params.schedule.mid_quantile(i, n)),
        })
        .collect::<Result<Vec<_>>>()?;
    s.push(0.0);
    Ok(s)
}

/// Few-step rollout with uniformly sampled levels; see [`forecast_approx_with`].
pub fn forecast_approx<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    j: usize,
    n: usize,
    rng: &mut R,
) -> Result<(Array3<f64>, UnrollTape)> {
    forecast_approx_with(params, x_prev, x_cur, j, n, SigmaSampling::Uniform, rng)
}

/// `j` autoregressive steps, each denoising pure noise through `n` levels
/// drawn from consecutive quantile intervals and then to 0. Levels are
/// redrawn at every lead step.
pub fn forecast_approx_with<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x_prev: &ArrayView3<f64>,
    x_cur: &ArrayView3<f64>,
    j: usize,
    n: usize,
    sampling: SigmaSampling,
    rng: &mut R,
) -> Result<(Array3<f64>, UnrollTape)> {
    let max = params.schedule.n_full;
    if n == 0 || n > max || j == 0 {
        return Err(Error::BadStepCount {
            n: if j == 0 { j } else { n },
            max,
        });
    }
    check_inputs(params, x_prev, x_cur)?;
    let mut prev = x_prev.to_owned();
    let mut cur = x_cur.to_owned();
    let mut leads = Vec::with_capacity(j);
    for _ in 0..j {
        let sigmas = approx_sigmas(params, n, sampling, rng)?;
        let cond = params.condition(&prev.view(), &cur.view())?;
        let initial_noise = sample_noise(cur.dim(), sigmas[0], rng);
        let mut z = initial_noise.clone();
        let mut acts = Vec::with_capacity(n);
        for w in sigmas.windows(2) {
            let (next, act) = step_with(params, &cond, &z.view(), w[0], w[1])?;
            acts.push(act);
            z = next;
        }
        leads.push(LeadRecord {
            cond,
            sigmas,
            initial_noise,
            acts,
        });
        prev = std::mem::replace(&mut cur, z);
    }
    let tape = UnrollTape {
        x_prev: x_prev.to_owned(),
        x_cur: x_cur.to_owned(),
        leads,
        output: cur.clone(),
        params_fingerprint: fingerprint(params),
    };
    Ok((cur, tape))
}

/// Gradients of `<cotangent, output>` w.r.t. the two conditioning states.
/// Noise draws and levels are held fixed.
pub fn forecast_approx_vjp(params: &DenoiserParams, tape: &UnrollTape, cotangent: &ArrayView3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    tape.check_params(params)?;
    if cotangent.dim() != tape.output.dim() {
        return Err(Error::TapeMismatch(format!(
            "cotangent shape {:?} vs output {:?}",
            cotangent.dim(),
            tape.output.dim()
        )));
    }
    let j = tape.leads.len();
    // grads[k] belongs to state k of the sequence (x_prev, x_cur, y_1, ..., y_j)
    let mut grads: Vec<Array3<f64>> = (0..j + 2).map(|_| Array3::zeros(cotangent.dim())).collect();
    grads[j + 1].assign(cotangent);
    for (k, lead) in tape.leads.iter().enumerate().rev() {
        let mut g = std::mem::replace(&mut grads[k + 2], Array3::zeros((0, 0, 0)));
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let mut g_cond = Array2::zeros(lead.cond.pre.dim());
        for (i, act) in lead.acts.iter().enumerate().rev() {
            g = step_backward(params, act, lead.sigmas[i + 1], &g.view(), &mut g_cond)?;
        }
        let (gp, gc) = params.condition_backward(&lead.cond, &g_cond);
        grads[k] += &gp;
        grads[k + 1] += &gc;
    }
    let g_cur = grads.swap_remove(1);
    let g_prev = grads.swap_remove(0);
    Ok((g_prev, g_cur))
}

/// RMS difference between two fields.
pub fn rms(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-variable RMS difference between two fields.
pub fn rms_per_variable(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Vec<f64> {
    let d = a - b;
    d.axis_iter(Axis(2))
        .map(|v| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
        .collect()
}
