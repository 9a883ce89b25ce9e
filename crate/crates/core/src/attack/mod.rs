//! Adversarial perturbations of the two conditioning states.
//!
//! Perturbations live in background-error units: variable `v` of a field is
//! shifted by `sigma_b[v] * delta[.., .., v]` in normalized space, so the
//! budget `epsilon` caps each variable's perturbation std at `epsilon`
//! background-error standard deviations.

pub mod loss;
pub mod search;

use std::time::Instant;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

pub use loss::{AdversarialLoss, Functional, LossTerm, Smoothing, DEFAULT_TAU};
pub use search::{crossing_budget, min_budget_search};

use crate::error::{shape_err, Error, Result};
use crate::grid::VariableStats;
use crate::inference::{ensemble_members, forecast_approx, forecast_approx_vjp, median_field, member_rng, ForecastConfig};
use crate::model::network::{denoiser_vjp, DenoiserParams};
use crate::model::schedule::sample_noise;

/// Per-variable mean and population std over all cells of a field.
pub fn variable_moments(field: &ArrayView3<f64>) -> Vec<(f64, f64)> {
    field
        .axis_iter(Axis(2))
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.sum() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// `Pi_eps`: per variable, `(delta - mu) * min(eps, sigma) / sigma`, zero when `sigma = 0`.
pub fn project(delta: &ArrayView3<f64>, epsilon: f64) -> Array3<f64> {
    let mut out = delta.to_owned();
    for (mut lane, (mu, sd)) in out.axis_iter_mut(Axis(2)).zip(variable_moments(delta)) {
        if sd > 0.0 {
            let scale = epsilon.min(sd) / sd;
            lane.mapv_inplace(|x| (x - mu) * scale);
        } else {
            lane.fill(0.0);
        }
    }
    out
}

/// Perturbations of `X^t` and `X^{t-1}` in background-error units.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta_t: Array3<f64>,
    pub delta_tm1: Array3<f64>,
}

impl Perturbation {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            delta_t: Array3::zeros(shape),
            delta_tm1: Array3::zeros(shape),
        }
    }

    pub fn project(&self, epsilon: f64) -> Self {
        Self {
            delta_t: project(&self.delta_t.view(), epsilon),
            delta_tm1: project(&self.delta_tm1.view(), epsilon),
        }
    }

    /// `(mu_v, sigma_v)` of `delta_t` then `delta_tm1`.
    pub fn moments(&self) -> [Vec<(f64, f64)>; 2] {
        [variable_moments(&self.delta_t.view()), variable_moments(&self.delta_tm1.view())]
    }

    pub fn is_zero(&self) -> bool {
        self.delta_t.iter().chain(self.delta_tm1.iter()).all(|&x| x == 0.0)
    }
}

/// `x + sigma_b * delta`, per variable.
pub fn apply_delta(x: &ArrayView3<f64>, delta: &ArrayView3<f64>, sigma_b: &[f64]) -> Result<Array3<f64>> {
    if x.dim() != delta.dim() || sigma_b.len() != x.dim().2 {
        return Err(shape_err(format!("{:?}", x.dim()), format!("{:?}", delta.dim())));
    }
    let mut out = x.to_owned();
    for ((mut o, d), s) in out.axis_iter_mut(Axis(2)).zip(delta.axis_iter(Axis(2))).zip(sigma_b) {
        o.scaled_add(*s, &d);
    }
    Ok(out)
}

fn scale_by_variable(g: &mut Array3<f64>, sigma_b: &[f64]) {
    for (mut lane, s) in g.axis_iter_mut(Axis(2)).zip(sigma_b) {
        lane.mapv_inplace(|x| x * s);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSteps,
    NoApprox,
    NoBoth,
    Advdm,
    DpAttacker,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSteps,
        Variant::NoApprox,
        Variant::NoBoth,
        Variant::Advdm,
        Variant::DpAttacker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSteps => "no-steps",
            Variant::NoApprox => "no-approx",
            Variant::NoBoth => "no-both",
            Variant::Advdm => "advdm",
            Variant::DpAttacker => "dp-attacker",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }

    /// Momentum and the cosine schedule (otherwise `beta = 0`, `alpha = eps`).
    pub fn scheduled_steps(self) -> bool {
        matches!(self, Variant::Full | Variant::NoApprox)
    }

    /// Multi-level approximation (otherwise `n = 1`).
    pub fn multi_level(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSteps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Attack iterations `N`.
    pub iterations: usize,
    /// Lead steps `j`.
    pub lead_steps: usize,
    /// Approximation steps `n`.
    pub approx_steps: usize,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0025,
            iterations: 50,
            lead_steps: 4,
            approx_steps: 2,
            beta: 0.9,
            tau: DEFAULT_TAU,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 || self.lead_steps == 0 || self.approx_steps == 0 {
            return Err(Error::InvalidParameter(
                "iterations, lead_steps and approx_steps must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta) || !(self.tau > 0.0) {
            return Err(Error::InvalidParameter("beta in [0, 1) and tau > 0 required".into()));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// `(beta, n)` actually used by the variant.
    pub fn effective(&self) -> (f64, usize) {
        let v = self.variant;
        let beta = if v.scheduled_steps() { self.beta } else { 0.0 };
        let n = if v.multi_level() { self.approx_steps } else { 1 };
        (beta, n)
    }

    /// Step size at iteration `i` (1-based).
    pub fn step_size(&self, i: usize) -> f64 {
        if self.variant.scheduled_steps() {
            let (eps, n) = (self.epsilon, self.iterations as f64);
            let base = eps / n + 0.5 * (2.0 * eps - eps / n) * (1.0 + ((i as f64 - 1.0) * std::f64::consts::PI / n).cos());
            base / (1.0 - self.beta.powi(i as i32))
        } else {
            self.epsilon
        }
    }
}

/// Unperturbed inputs and the scales shared by every attack on them.
#[derive(Clone, Debug)]
pub struct AttackContext<'a> {
    pub params: &'a DenoiserParams,
    pub stats: &'a VariableStats,
    /// Background-error std per variable, normalized units.
    pub sigma_b: &'a [f64],
    pub x_prev: ArrayView3<'a, f64>,
    pub x_cur: ArrayView3<'a, f64>,
}

impl AttackContext<'_> {
    fn check(&self) -> Result<()> {
        let nv = self.params.n_vars;
        if self.x_prev.dim() != self.x_cur.dim() || self.x_cur.dim().2 != nv {
            return Err(shape_err(format!("{:?}", self.x_prev.dim()), format!("{:?}", self.x_cur.dim())));
        }
        if self.sigma_b.len() != nv || self.stats.n_vars() != nv {
            return Err(shape_err(nv, self.sigma_b.len()));
        }
        if self.sigma_b.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter("background error std must be positive".into()));
        }
        Ok(())
    }

    /// The conditioning pair with `p` applied.
    pub fn perturbed(&self, p: &Perturbation) -> Result<(Array3<f64>, Array3<f64>)> {
        Ok((
            apply_delta(&self.x_prev, &p.delta_tm1.view(), self.sigma_b)?,
            apply_delta(&self.x_cur, &p.delta_t.view(), self.sigma_b)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// Smoothed objective at each iteration, before the update.
    pub loss: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

/// Gradient of the variant's objective w.r.t. `(delta_t, delta_tm1)`.
type Objective<'o> = dyn FnMut(&Array3<f64>, &Array3<f64>) -> Result<(f64, Array3<f64>, Array3<f64>)> + 'o;

fn optimise(
    ctx: &AttackContext<'_>,
    config: &AttackConfig,
    sign_gradient: bool,
    objective: &mut Objective<'_>,
) -> Result<(Perturbation, IterationLog)> {
    let (beta, _) = config.effective();
    let shape = ctx.x_cur.dim();
    let mut delta = Perturbation::zeros(shape);
    let mut m_t = Array3::zeros(shape);
    let mut m_tm1 = Array3::zeros(shape);
    let mut log = IterationLog {
        loss: Vec::with_capacity(config.iterations),
        step_sizes: Vec::with_capacity(config.iterations),
    };
    for i in 1..=config.iterations {
        let (xp, xc) = ctx.perturbed(&delta)?;
        let (value, mut gp, mut gc) = objective(&xp, &xc)?;
        if !value.is_finite() {
            return Err(Error::NumericalBlowup(format!("attack objective at iteration {i}")));
        }
        scale_by_variable(&mut gp, ctx.sigma_b);
        scale_by_variable(&mut gc, ctx.sigma_b);
        if sign_gradient {
            gp.mapv_inplace(sign);
            gc.mapv_inplace(sign);
        }
        let np = project(&gp.view(), 1.0);
        let nc = project(&gc.view(), 1.0);
        Zip::from(&mut m_tm1).and(&np).for_each(|m, g| *m = beta * *m + (1.0 - beta) * g);
        Zip::from(&mut m_t).and(&nc).for_each(|m, g| *m = beta * *m + (1.0 - beta) * g);
        let alpha = config.step_size(i);
        delta.delta_tm1.scaled_add(-alpha, &m_tm1);
        delta.delta_t.scaled_add(-alpha, &m_t);
        delta = delta.project(config.epsilon);
        log.loss.push(value);
        log.step_sizes.push(alpha);
    }
    Ok((delta, log))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Any attack variant; `Full` is the momentum/cosine attack with `n`-level
/// approximate inference. Fresh noise is drawn at every iteration.
pub fn attack(ctx: &AttackContext<'_>, loss: &AdversarialLoss, config: &AttackConfig) -> Result<(Perturbation, IterationLog)> {
    config.validate()?;
    ctx.check()?;
    let (nl, nc, nv) = ctx.x_cur.dim();
    loss.validate(nv, (nl, nc))?;
    let mut rng = member_rng(config.seed, 0);
    let (_, n) = config.effective();
    let j = config.lead_steps;
    let tau = config.tau;
    match config.variant {
        Variant::Full | Variant::NoSteps | Variant::NoApprox | Variant::NoBoth | Variant::DpAttacker => {
            let mut obj = |xp: &Array3<f64>, xc: &Array3<f64>| {
                let (y, tape) = forecast_approx(ctx.params, &xp.view(), &xc.view(), j, n, &mut rng)?;
                let (value, cot) = loss.value_and_grad(&y.view(), ctx.stats, Smoothing::Soft { tau })?;
                let (gp, gc) = forecast_approx_vjp(ctx.params, &tape, &cot.view())?;
                Ok((value, gp, gc))
            };
            optimise(ctx, config, config.variant == Variant::DpAttacker, &mut obj)
        }
        Variant::Advdm => {
            // negative denoising error inside the loss regions, against the
            // clean single-step forecast, at a freshly sampled level
            let (reference, _) = forecast_approx(ctx.params, &ctx.x_prev, &ctx.x_cur, 1, 1, &mut rng)?;
            let mut region = Array3::<f64>::zeros(reference.dim());
            for term in &loss.terms {
                for (r, c) in term.mask.indices() {
                    region.slice_mut(ndarray::s![r, c, ..]).fill(1.0);
                }
            }
            let count = region.sum();
            let mut obj = |xp: &Array3<f64>, xc: &Array3<f64>| {
                let sigma = ctx.params.schedule.sample_sigma(0.0, 1.0, &mut rng)?;
                let z = &reference + &sample_noise(reference.dim(), sigma, &mut rng);
                let d = crate::model::denoiser_forward(ctx.params, &xp.view(), &xc.view(), &z.view(), sigma)?;
                let err = (&d - &reference) * &region;
                let value = -err.iter().map(|e| e * e).sum::<f64>() / count;
                let cot = err.mapv(|e| -2.0 * e / count);
                let (gp, gc, _) = denoiser_vjp(ctx.params, &xp.view(), &xc.view(), &z.view(), sigma, &cot.view())?;
                Ok((value, gp, gc))
            };
            optimise(ctx, config, false, &mut obj)
        }
    }
}

/// How member forecasts are reduced before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Score the elementwise median field.
    #[default]
    MedianField,
    /// Median of per-member scores.
    MedianOfMembers,
}

/// Scores `A` on full-sampler ensembles of the last lead step.
#[derive(Clone, Debug)]
pub struct DeviationEvaluator<'a> {
    pub ctx: AttackContext<'a>,
    pub loss: &'a AdversarialLoss,
    pub forecast: ForecastConfig,
    pub aggregation: Aggregation,
    clean: Option<(f64, Array3<f64>)>,
}

impl<'a> DeviationEvaluator<'a> {
    pub fn new(ctx: AttackContext<'a>, loss: &'a AdversarialLoss, forecast: ForecastConfig, aggregation: Aggregation) -> Self {
        Self {
            ctx,
            loss,
            forecast,
            aggregation,
            clean: None,
        }
    }

    /// Hard `A` and the aggregated final-lead forecast under `p`. Members use
    /// the same seeds for every perturbation.
    pub fn score(&self, p: &Perturbation) -> Result<(f64, Array3<f64>)> {
        let (xp, xc) = self.ctx.perturbed(p)?;
        let members = ensemble_members(self.ctx.params, &xp.view(), &xc.view(), &self.forecast)?;
        let last: Vec<&Array3<f64>> = members.iter().map(|m| m.last().expect("lead_steps >= 1")).collect();
        let median = median_field(&last)?;
        let value = match self.aggregation {
            Aggregation::MedianField => self.loss.eval(&median.view(), self.ctx.stats, Smoothing::Hard)?,
            Aggregation::MedianOfMembers => {
                let mut v = last
                    .iter()
                    .map(|m| self.loss.eval(&m.view(), self.ctx.stats, Smoothing::Hard))
                    .collect::<Result<Vec<_>>>()?;
                v.sort_by(f64::total_cmp);
                let k = v.len();
                if k % 2 == 1 {
                    v[k / 2]
                } else {
                    0.5 * (v[k / 2 - 1] + v[k / 2])
                }
            }
        };
        Ok((value, median))
    }

    pub fn clean(&mut self) -> Result<&(f64, Array3<f64>)> {
        if self.clean.is_none() {
            let zero = Perturbation::zeros(self.ctx.x_cur.dim());
            self.clean = Some(self.score(&zero)?);
        }
        Ok(self.clean.as_ref().expect("just set"))
    }

    /// `A(clean) - A(attacked)` in raw units; positive when the attack helps.
    pub fn induced_deviation(&mut self, p: &Perturbation) -> Result<f64> {
        if p.is_zero() {
            return Ok(0.0);
        }
        let base = self.clean()?.0;
        Ok(base - self.score(p)?.0)
    }
}

/// Machine-readable record of one attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: AttackConfig,
    pub loss_curve: Vec<f64>,
    /// `(mu_v, sigma_v)` of `delta_t`.
    pub moments_t: Vec<(f64, f64)>,
    /// `(mu_v, sigma_v)` of `delta_tm1`.
    pub moments_tm1: Vec<(f64, f64)>,
    /// Raw units of the target functional.
    pub induced_deviation: f64,
    pub wall_clock_secs: f64,
}

/// Attack, then score the perturbation on the full-sampler ensemble.
pub fn run_trial(evaluator: &mut DeviationEvaluator<'_>, config: &AttackConfig) -> Result<(Perturbation, TrialRecord)> {
    let start = Instant::now();
    let (p, log) = attack(&evaluator.ctx, evaluator.loss, config)?;
    let dev = evaluator.induced_deviation(&p)?;
    let [mt, mtm1] = p.moments();
    let record = TrialRecord {
        config: config.clone(),
        loss_curve: log.loss,
        moments_t: mt,
        moments_tm1: mtm1,
        induced_deviation: dev,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((p, record))
}
