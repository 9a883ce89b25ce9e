//! Aggregate tables, CSV encoding and the audit that recomputes aggregates
//! from per-trial rows.
//!
//! Column order of every CSV is the field order of its row struct.

use std::collections::BTreeMap;
use std::path::Path;

use advobs_core::attack::{crossing_budget, Variant};
use advobs_core::climatology::percentile;
use advobs_core::detect::{analytic_power, monte_carlo_power};
use advobs_core::io;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{HarnessError, Result};
use crate::experiment::TrialRow;

/// Point of the budget sweep curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: Scenario,
    pub variant: Variant,
    pub budget: f64,
    pub n_trials: usize,
    pub mean_deviation: f64,
    pub p05_deviation: f64,
    pub p95_deviation: f64,
}

/// Mean deviation of a variant relative to the full attack, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scenario: Scenario,
    pub variant: Variant,
    pub budget: f64,
    pub n_trials: usize,
    pub mean_deviation: f64,
    /// `100 * mean(variant) / mean(full)`; empty without a full row.
    pub relative_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRow {
    pub scenario: Scenario,
    pub variant: Variant,
    /// Extreme-deviation threshold the mean deviation has to reach (raw units).
    pub threshold: f64,
    /// `ok` or `no-crossing`.
    pub status: String,
    pub min_budget: Option<f64>,
    /// Sample size of the variance test.
    pub m: usize,
    pub alpha: f64,
    pub analytic_power: Option<f64>,
    pub monte_carlo_power: Option<f64>,
    pub monte_carlo_trials: usize,
}

type Groups = BTreeMap<(Scenario, String, u64), (Variant, f64, Vec<f64>)>;

/// Deviations grouped by `(scenario, variant, budget)` in trial order.
fn groups(rows: &[TrialRow]) -> Groups {
    let mut g = Groups::new();
    let mut sorted: Vec<&TrialRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.trial);
    for r in sorted {
        g.entry((r.scenario, r.variant.name().to_string(), r.budget.to_bits()))
            .or_insert_with(|| (r.variant, r.budget, Vec::new()))
            .2
            .push(r.induced_deviation);
    }
    g
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn sweep_rows(rows: &[TrialRow]) -> Vec<SweepRow> {
    groups(rows)
        .into_iter()
        .map(|((scenario, _, _), (variant, budget, devs))| SweepRow {
            scenario,
            variant,
            budget,
            n_trials: devs.len(),
            mean_deviation: mean(&devs),
            p05_deviation: percentile(&devs, 0.05),
            p95_deviation: percentile(&devs, 0.95),
        })
        .collect()
}

/// One row per `(scenario, variant)` at `budget`.
pub fn ablation_rows(rows: &[TrialRow], budget: f64) -> Vec<AblationRow> {
    let at: Vec<TrialRow> = rows.iter().filter(|r| r.budget == budget).cloned().collect();
    let sweep = sweep_rows(&at);
    let full: BTreeMap<Scenario, f64> = sweep
        .iter()
        .filter(|s| s.variant == Variant::Full)
        .map(|s| (s.scenario, s.mean_deviation))
        .collect();
    sweep
        .iter()
        .map(|s| AblationRow {
            scenario: s.scenario,
            variant: s.variant,
            budget: s.budget,
            n_trials: s.n_trials,
            mean_deviation: s.mean_deviation,
            relative_percent: full.get(&s.scenario).map(|f| 100.0 * s.mean_deviation / f),
        })
        .collect()
}

/// Parameters of the detectability table.
#[derive(Clone, Copy, Debug)]
pub struct DetectSettings {
    pub m: usize,
    pub alpha: f64,
    pub mc_trials: usize,
    pub seed: u64,
}

/// Minimum budget of each variant's mean-deviation curve (with the origin
/// prepended) and the detection power of noise of that size.
pub fn detect_rows(sweep: &[SweepRow], threshold_of: impl Fn(Scenario) -> Option<f64>, s: DetectSettings) -> Result<Vec<DetectRow>> {
    type Curves = BTreeMap<(Scenario, String), (Variant, Vec<f64>, Vec<f64>)>;
    let mut curves = Curves::new();
    for r in sweep {
        let e = curves
            .entry((r.scenario, r.variant.name().to_string()))
            .or_insert_with(|| (r.variant, vec![0.0], vec![0.0]));
        e.1.push(r.budget);
        e.2.push(r.mean_deviation);
    }
    let mut out = Vec::new();
    for (k, ((scenario, _), (variant, budgets, devs))) in curves.into_iter().enumerate() {
        let Some(threshold) = threshold_of(scenario) else { continue };
        let found = match crossing_budget(&budgets, &devs, threshold) {
            Ok(e) => Some(e),
            Err(advobs_core::Error::NoCrossing { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let (analytic, mc) = match found {
            Some(e) => {
                let mc = if s.mc_trials > 0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                    rng.set_stream(k as u64);
                    Some(monte_carlo_power(s.m, 1.0, e, s.alpha, s.mc_trials, &mut rng)?)
                } else {
                    None
                };
                (Some(analytic_power(s.m, 1.0, e, s.alpha)), mc)
            }
            None => (None, None),
        };
        out.push(DetectRow {
            scenario,
            variant,
            threshold,
            status: if found.is_some() { "ok" } else { "no-crossing" }.into(),
            min_budget: found,
            m: s.m,
            alpha: s.alpha,
            analytic_power: analytic,
            monte_carlo_power: mc,
            monte_carlo_trials: if found.is_some() { s.mc_trials } else { 0 },
        });
    }
    Ok(out)
}

/// Pre/post regional maxima of the concealment scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcealRow {
    pub variant: Variant,
    pub budget: f64,
    pub trial: usize,
    pub start_index: usize,
    pub region_row: usize,
    pub region_col: usize,
    /// `ok` or `no-event`.
    pub status: String,
    pub pre_max: Option<f64>,
    pub post_max: Option<f64>,
    pub reduction: Option<f64>,
}

pub fn encode_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Audit(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    io::write_atomic(path, &encode_csv(rows, header)?)?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub const TRIAL_COLUMNS: &[&str] = &[
    "scenario",
    "variant",
    "budget",
    "trial",
    "start_index",
    "target_row",
    "target_col",
    "clean_value",
    "attacked_value",
    "induced_deviation",
    "final_loss",
    "max_sigma",
    "effective_epsilon",
];
pub const SWEEP_COLUMNS: &[&str] = &[
    "scenario",
    "variant",
    "budget",
    "n_trials",
    "mean_deviation",
    "p05_deviation",
    "p95_deviation",
];
pub const ABLATION_COLUMNS: &[&str] = &["scenario", "variant", "budget", "n_trials", "mean_deviation", "relative_percent"];
pub const DETECT_COLUMNS: &[&str] = &[
    "scenario",
    "variant",
    "threshold",
    "status",
    "min_budget",
    "m",
    "alpha",
    "analytic_power",
    "monte_carlo_power",
    "monte_carlo_trials",
];
pub const CONCEAL_COLUMNS: &[&str] = &[
    "variant",
    "budget",
    "trial",
    "start_index",
    "region_row",
    "region_col",
    "status",
    "pre_max",
    "post_max",
    "reduction",
];
pub const REROUTE_COLUMNS: &[&str] = &[
    "variant",
    "budget",
    "trial",
    "start_index",
    "lead",
    "clean_track_row",
    "clean_track_col",
    "attacked_track_row",
    "attacked_track_col",
    "clean_value",
    "attacked_value",
];

/// Recompute `aggregate` from the trial CSV and compare bytes with the
/// aggregate CSV on disk.
pub fn audit<A: Serialize>(
    trials_csv: &Path,
    aggregate_csv: &Path,
    header: &[&str],
    recompute: impl Fn(&[TrialRow]) -> Vec<A>,
) -> Result<usize> {
    let rows: Vec<TrialRow> = read_csv(trials_csv)?;
    let expected = encode_csv(&recompute(&rows), header)?;
    let found = std::fs::read(aggregate_csv)?;
    if expected != found {
        return Err(HarnessError::Audit(format!(
            "{} does not match a recomputation from {}",
            aggregate_csv.display(),
            trials_csv.display()
        )));
    }
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, budget: f64, trial: usize, dev: f64) -> TrialRow {
        TrialRow {
            scenario: Scenario::FabricateWind,
            variant,
            budget,
            trial,
            start_index: 0,
            target_row: 0,
            target_col: 0,
            clean_value: 0.0,
            attacked_value: -dev,
            induced_deviation: dev,
            final_loss: 0.0,
            max_sigma: budget,
            effective_epsilon: budget,
        }
    }

    #[test]
    fn one_budget_one_trial_gives_one_row() {
        let s = sweep_rows(&[row(Variant::Full, 0.0025, 0, 0.3)]);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean_deviation, s[0].p05_deviation, s[0].p95_deviation), (0.3, 0.3, 0.3));
    }

    #[test]
    fn ablation_is_relative_to_full() {
        let rows = vec![
            row(Variant::Full, 0.0025, 0, 0.4),
            row(Variant::Full, 0.0025, 1, 0.2),
            row(Variant::NoBoth, 0.0025, 0, 0.1),
            row(Variant::NoBoth, 0.0025, 1, 0.05),
            row(Variant::NoBoth, 0.001, 0, 9.0),
        ];
        let a = ablation_rows(&rows, 0.0025);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].variant, Variant::Full);
        assert_eq!(a[0].relative_percent, Some(100.0));
        assert!((a[1].relative_percent.unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn detect_rows_interpolate_the_mean_curve() {
        let rows = vec![row(Variant::Full, 0.001, 0, 1.0), row(Variant::Full, 0.002, 0, 2.0)];
        let settings = DetectSettings {
            m: 256,
            alpha: 0.05,
            mc_trials: 0,
            seed: 0,
        };
        let d = detect_rows(&sweep_rows(&rows), |_| Some(4.0), settings).unwrap();
        assert_eq!(d[0].status, "ok");
        assert!((d[0].min_budget.unwrap() - 0.004).abs() < 1e-15);
        let d = detect_rows(&sweep_rows(&[row(Variant::Full, 0.001, 0, -1.0)]), |_| Some(4.0), settings).unwrap();
        assert_eq!(d[0].status, "no-crossing");
        assert_eq!(d[0].analytic_power, None);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let rows = vec![row(Variant::NoApprox, 0.000375, 3, 0.1 + 0.2), row(Variant::Full, 1e-7, 1, -3.3e-9)];
        let bytes = encode_csv(&rows, TRIAL_COLUMNS).unwrap();
        let header = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, TRIAL_COLUMNS.join(","));
        let back: Vec<TrialRow> = csv::Reader::from_reader(&bytes[..])
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
    }
}
