//! Paired trial matrices: every (variant, budget) of a trial attacks the same
//! inputs with the same attack and ensemble seeds.

use std::time::Instant;

use advobs_core::attack::{
    attack, AdversarialLoss, AttackConfig, AttackContext, DeviationEvaluator, Functional, LossTerm, Perturbation, TrialRecord, Variant,
};
use advobs_core::detect::effective_epsilon;
use advobs_core::grid::{GridSpec, Quantity, SpatialMask};
use advobs_core::inference::{forecast_ensemble, ForecastConfig};
use advobs_core::model::DenoiserParams;
use advobs_core::Error;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::Result;
use crate::pipeline::Setup;

/// Inputs and target of one frozen-seed trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialCase {
    pub scenario: Scenario,
    pub trial: usize,
    /// Eval-split index of `x_prev`; `x_cur` is the next state.
    pub start: usize,
    /// Target cell, or top-left corner of the target region.
    pub row: usize,
    pub col: usize,
    /// Seeds both the attack noise and the scoring ensemble.
    pub seed: u64,
}

/// Draws from stream `(scenario << 32) | trial` of the trials seed, so adding
/// trials or scenarios never changes existing cases.
pub fn trial_case(cfg: &ExperimentConfig, n_eval: usize, scenario: Scenario, trial: usize) -> Result<TrialCase> {
    let need = cfg.lead_steps + 3;
    if n_eval < need {
        return Err(Error::InsufficientData(format!("eval split has {n_eval} states, trials need {need}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().trials);
    rng.set_stream((scenario.index() << 32) | trial as u64);
    let rows = match scenario {
        Scenario::ConcealRegion => cfg.conceal.region_rows,
        Scenario::RerouteTarget => cfg.reroute.region_rows,
        _ => 1,
    };
    let start = rng.random_range(0..=n_eval - need);
    let row = rng.random_range(0..=cfg.data.n_lat - rows);
    let col = rng.random_range(0..cfg.data.n_lon);
    Ok(TrialCase {
        scenario,
        trial,
        start,
        row,
        col,
        seed: rng.next_u64(),
    })
}

/// `rows x cols` block with its top-left at `(row, col)`; columns wrap.
pub fn block_mask(spec: &GridSpec, row: usize, col: usize, rows: usize, cols: usize) -> Result<SpatialMask> {
    let mut cells = Array2::from_elem((spec.n_lat, spec.n_lon), false);
    for r in row..(row + rows).min(spec.n_lat) {
        for k in 0..cols.min(spec.n_lon) {
            cells[[r, (col + k) % spec.n_lon]] = true;
        }
    }
    Ok(SpatialMask::from_cells(cells)?)
}

pub fn scenario_loss(cfg: &ExperimentConfig, spec: &GridSpec, case: &TrialCase) -> Result<AdversarialLoss> {
    let single = || SpatialMask::single(spec, case.row, case.col);
    let var = |name: &str| Quantity::named(spec, name);
    Ok(match case.scenario {
        Scenario::FabricateWind => AdversarialLoss::single(
            single()?,
            Functional::NegateMin {
                quantity: Quantity::wind(spec)?,
            },
        ),
        Scenario::FabricateTemp => AdversarialLoss::single(
            single()?,
            Functional::NegateMaxDeviation {
                quantity: var(advobs_core::grid::TEMPERATURE)?,
            },
        ),
        Scenario::FabricatePrecip => AdversarialLoss::single(
            single()?,
            Functional::NegateMaxDeviation {
                quantity: var(advobs_core::grid::PRECIPITATION)?,
            },
        ),
        Scenario::ConcealRegion => {
            let c = &cfg.conceal;
            AdversarialLoss::single(
                block_mask(spec, case.row, case.col, c.region_rows, c.region_cols)?,
                Functional::MinimizeMax {
                    quantity: var(&c.quantity)?,
                },
            )
        }
        Scenario::RerouteTarget => {
            let r = &cfg.reroute;
            let q = var(&r.quantity)?;
            AdversarialLoss {
                terms: vec![
                    LossTerm {
                        weight: 1.0,
                        mask: block_mask(spec, case.row, case.col, r.region_rows, r.region_cols)?,
                        functional: Functional::MinimizeMax { quantity: q },
                    },
                    LossTerm {
                        weight: 1.0,
                        mask: block_mask(spec, case.row, (case.col + r.shift_cols) % spec.n_lon, r.region_rows, r.region_cols)?,
                        functional: Functional::NegateMaxDeviation { quantity: q },
                    },
                ],
            }
        }
    })
}

pub fn attack_config(cfg: &ExperimentConfig, case: &TrialCase, variant: Variant, budget: f64) -> AttackConfig {
    AttackConfig {
        epsilon: budget,
        iterations: cfg.iterations,
        lead_steps: cfg.lead_steps,
        approx_steps: cfg.approx_steps,
        beta: cfg.beta,
        tau: cfg.tau,
        seed: case.seed,
        variant,
    }
}

pub fn forecast_config(cfg: &ExperimentConfig, case: &TrialCase) -> ForecastConfig {
    ForecastConfig {
        lead_steps: cfg.lead_steps,
        n_full: cfg.n_full,
        ensemble_size: cfg.ensemble_size,
        seed: case.seed,
    }
}

/// One row of the per-trial CSV. Values are the hard objective `A` in raw
/// units; `induced_deviation = clean_value - attacked_value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub scenario: Scenario,
    pub variant: Variant,
    pub budget: f64,
    pub trial: usize,
    pub start_index: usize,
    pub target_row: usize,
    pub target_col: usize,
    pub clean_value: f64,
    pub attacked_value: f64,
    pub induced_deviation: f64,
    pub final_loss: f64,
    /// Largest per-variable std of the perturbation over both fields.
    pub max_sigma: f64,
    pub effective_epsilon: f64,
}

/// A trial whose precondition failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrial {
    pub scenario: Scenario,
    pub trial: usize,
    pub start_index: usize,
    pub row: usize,
    pub col: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct MatrixOutput {
    pub rows: Vec<TrialRow>,
    pub records: Vec<TrialRecord>,
    pub skipped: Vec<SkippedTrial>,
}

impl MatrixOutput {
    fn extend(&mut self, other: MatrixOutput) {
        self.rows.extend(other.rows);
        self.records.extend(other.records);
        self.skipped.extend(other.skipped);
    }
}

/// Regional maximum of `q` on the climatology of the forecast's valid day.
fn climatological_max(setup: &Setup, loss: &AdversarialLoss, day: usize) -> Result<f64> {
    let term = &loss.terms[0];
    let field = setup.climatology.field(term.functional.quantity(), day)?;
    Ok(term
        .mask
        .indices()
        .iter()
        .map(|&(r, c)| field[[r, c]])
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `Err(NoEventFound)` when the clean regional maximum does not exceed its
/// climatological counterpart by more than the trigger anomaly.
pub fn check_conceal_trigger(
    cfg: &ExperimentConfig,
    setup: &Setup,
    case: &TrialCase,
    loss: &AdversarialLoss,
    clean_max: f64,
) -> Result<()> {
    let day = setup.eval_traj.day_of_year(case.start + 1 + cfg.lead_steps);
    let clim = climatological_max(setup, loss, day)?;
    if clean_max - clim > cfg.conceal.trigger_anomaly {
        Ok(())
    } else {
        Err(Error::NoEventFound(format!(
            "trial {}: regional max {clean_max:.3} is not above climatology {clim:.3} + {}",
            case.trial, cfg.conceal.trigger_anomaly
        ))
        .into())
    }
}

/// Attack with `budget`; a zero budget yields the zero perturbation.
pub fn attack_or_zero(ctx: &AttackContext<'_>, loss: &AdversarialLoss, config: &AttackConfig) -> Result<(Perturbation, Vec<f64>)> {
    if config.epsilon == 0.0 {
        return Ok((Perturbation::zeros(ctx.x_cur.dim()), Vec::new()));
    }
    let (p, log) = attack(ctx, loss, config)?;
    Ok((p, log.loss))
}

/// All `(variant, budget)` pairs of one case.
pub fn run_case(
    cfg: &ExperimentConfig,
    setup: &Setup,
    params: &DenoiserParams,
    case: &TrialCase,
    pairs: &[(Variant, f64)],
) -> Result<MatrixOutput> {
    let loss = scenario_loss(cfg, &setup.spec, case)?;
    let ctx = AttackContext {
        params,
        stats: &setup.stats,
        sigma_b: &setup.calibration.sigma_b,
        x_prev: setup.eval[case.start].view(),
        x_cur: setup.eval[case.start + 1].view(),
    };
    let mut ev = DeviationEvaluator::new(ctx.clone(), &loss, forecast_config(cfg, case), cfg.aggregation);
    let clean_value = ev.clean()?.0;
    let mut out = MatrixOutput::default();
    if case.scenario == Scenario::ConcealRegion {
        // A is the regional max itself
        if let Err(e) = check_conceal_trigger(cfg, setup, case, &loss, clean_value) {
            out.skipped.push(SkippedTrial {
                scenario: case.scenario,
                trial: case.trial,
                start_index: case.start,
                row: case.row,
                col: case.col,
                reason: e.to_string(),
            });
            return Ok(out);
        }
    }
    for &(variant, budget) in pairs {
        let t = Instant::now();
        let config = attack_config(cfg, case, variant, budget);
        let (p, loss_curve) = attack_or_zero(&ctx, &loss, &config)?;
        let attacked_value = if p.is_zero() { clean_value } else { ev.score(&p)?.0 };
        let [mt, mtm1] = p.moments();
        let max_sigma = mt.iter().chain(&mtm1).map(|m| m.1).fold(0.0, f64::max);
        let induced = clean_value - attacked_value;
        out.rows.push(TrialRow {
            scenario: case.scenario,
            variant,
            budget,
            trial: case.trial,
            start_index: case.start,
            target_row: case.row,
            target_col: case.col,
            clean_value,
            attacked_value,
            induced_deviation: induced,
            final_loss: loss_curve.last().copied().unwrap_or(f64::NAN),
            max_sigma,
            effective_epsilon: effective_epsilon(&p),
        });
        out.records.push(TrialRecord {
            config,
            loss_curve,
            moments_t: mt,
            moments_tm1: mtm1,
            induced_deviation: induced,
            wall_clock_secs: t.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// Run `jobs` on up to `threads` scoped threads; results keep job order.
pub fn parallel_map<T: Sync, R: Send>(jobs: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= jobs.len() {
                            break local;
                        }
                        local.push((i, f(&jobs[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

/// Trials `0..cfg.trials` of `scenario`, each over every pair.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scenario: Scenario,
    pairs: &[(Variant, f64)],
    threads: usize,
) -> Result<MatrixOutput> {
    let cases = (0..cfg.trials)
        .map(|t| trial_case(cfg, setup.eval.len(), scenario, t))
        .collect::<Result<Vec<_>>>()?;
    let mut out = MatrixOutput::default();
    for r in parallel_map(&cases, threads, |c| run_case(cfg, setup, &setup.params, c, pairs)) {
        out.extend(r?);
    }
    Ok(out)
}

/// Grid cell of the minimum of `var` in a normalized state.
pub fn argmin_cell(state: &Array3<f64>, var: usize) -> (usize, usize) {
    let f = state.index_axis(Axis(2), var);
    let mut best = (0, 0);
    for ((r, c), v) in f.indexed_iter() {
        if *v < f[best] {
            best = (r, c);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerouteRow {
    pub variant: Variant,
    pub budget: f64,
    pub trial: usize,
    pub start_index: usize,
    pub lead: usize,
    pub clean_track_row: usize,
    pub clean_track_col: usize,
    pub attacked_track_row: usize,
    pub attacked_track_col: usize,
    /// Two-term objective on the final lead step.
    pub clean_value: f64,
    pub attacked_value: f64,
}

/// Reroute attack at the budget cap; the storm is tracked by the minimum of
/// the track variable on the ensemble-median forecast of every lead step.
pub fn run_reroute(cfg: &ExperimentConfig, setup: &Setup, threads: usize) -> Result<Vec<RerouteRow>> {
    let track = setup.spec.var_index(&cfg.reroute.track_variable)?;
    let cases = (0..cfg.trials)
        .map(|t| trial_case(cfg, setup.eval.len(), Scenario::RerouteTarget, t))
        .collect::<Result<Vec<_>>>()?;
    let budget = cfg.budget_cap();
    let per_case = parallel_map(&cases, threads, |case| -> Result<Vec<RerouteRow>> {
        let loss = scenario_loss(cfg, &setup.spec, case)?;
        let ctx = AttackContext {
            params: &setup.params,
            stats: &setup.stats,
            sigma_b: &setup.calibration.sigma_b,
            x_prev: setup.eval[case.start].view(),
            x_cur: setup.eval[case.start + 1].view(),
        };
        let fc = forecast_config(cfg, case);
        let clean = forecast_ensemble(&setup.params, &ctx.x_prev, &ctx.x_cur, &fc)?;
        let value = |seq: &[Array3<f64>]| {
            loss.eval(
                &seq.last().expect("lead >= 1").view(),
                &setup.stats,
                advobs_core::attack::Smoothing::Hard,
            )
        };
        let clean_value = value(&clean)?;
        let mut rows = Vec::new();
        for &variant in &cfg.variants {
            let (p, _) = attack_or_zero(&ctx, &loss, &attack_config(cfg, case, variant, budget))?;
            let (xp, xc) = ctx.perturbed(&p)?;
            let attacked = forecast_ensemble(&setup.params, &xp.view(), &xc.view(), &fc)?;
            let attacked_value = value(&attacked)?;
            for (k, (a, b)) in clean.iter().zip(&attacked).enumerate() {
                let (cr, cc) = argmin_cell(a, track);
                let (ar, ac) = argmin_cell(b, track);
                rows.push(RerouteRow {
                    variant,
                    budget,
                    trial: case.trial,
                    start_index: case.start,
                    lead: k + 1,
                    clean_track_row: cr,
                    clean_track_col: cc,
                    attacked_track_row: ar,
                    attacked_track_col: ac,
                    clean_value,
                    attacked_value,
                });
            }
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per_case {
        rows.extend(r?);
    }
    Ok(rows)
}
