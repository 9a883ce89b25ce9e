//! The CLI subcommands. Commands talk to each other only through files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use advobs_core::attack::Variant;
use advobs_core::io;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario, Seeds};
use crate::error::{HarnessError, Result};
use crate::experiment::{run_matrix, run_reroute, MatrixOutput, SkippedTrial, TrialRow};
use crate::pipeline::{load_setup, simulate_dataset, train_and_calibrate, Setup};
use crate::report::*;

/// Written next to every command's outputs as `<command>.meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommandMeta {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub outputs: Vec<String>,
    pub skipped: Vec<SkippedTrial>,
    pub runtime_secs: f64,
}

struct Recorder<'a> {
    command: &'static str,
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    outputs: Vec<String>,
    skipped: Vec<SkippedTrial>,
    start: Instant,
}

impl<'a> Recorder<'a> {
    fn new(command: &'static str, cfg: &'a ExperimentConfig, dir: &Path) -> Self {
        Self {
            command,
            cfg,
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
            skipped: Vec::new(),
            start: Instant::now(),
        }
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T], header: &[&str]) -> Result<()> {
        write_csv(&self.dir.join(name), rows, header)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        io::write_json(&self.dir.join(name), value)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self) -> Result<CommandMeta> {
        for s in &self.skipped {
            eprintln!("skipped {} trial {}: {}", s.scenario.name(), s.trial, s.reason);
        }
        let meta = CommandMeta {
            command: self.command.to_string(),
            config: self.cfg.clone(),
            seeds: self.cfg.seeds(),
            outputs: self.outputs,
            skipped: self.skipped,
            runtime_secs: self.start.elapsed().as_secs_f64(),
        };
        io::write_json(&self.dir.join(format!("{}.meta.json", self.command)), &meta)?;
        Ok(meta)
    }
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<CommandMeta> {
    let mut rec = Recorder::new("simulate", cfg, &cfg.paths.dataset);
    let traj = simulate_dataset(cfg)?;
    rec.outputs.push(format!("manifest.json ({} states)", traj.len()));
    rec.finish()
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<CommandMeta> {
    let dir = cfg.paths.model.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rec = Recorder::new("train", cfg, &dir);
    let (summary, _) = train_and_calibrate(cfg)?;
    rec.json("train_summary.json", &summary)?;
    rec.finish()
}

fn pairs(variants: &[Variant], budgets: &[f64]) -> Vec<(Variant, f64)> {
    variants.iter().flat_map(|&v| budgets.iter().map(move |&b| (v, b))).collect()
}

fn matrix(cfg: &ExperimentConfig, setup: &Setup, scenarios: &[Scenario], pairs: &[(Variant, f64)], threads: usize) -> Result<MatrixOutput> {
    let mut out = MatrixOutput::default();
    for &s in scenarios {
        let m = run_matrix(cfg, setup, s, pairs, threads)?;
        out.rows.extend(m.rows);
        out.records.extend(m.records);
        out.skipped.extend(m.skipped);
    }
    Ok(out)
}

/// Concealment rows at every pair; skipped trials appear as `no-event`.
pub fn conceal_rows(rows: &[TrialRow], skipped: &[SkippedTrial], pairs: &[(Variant, f64)]) -> Vec<ConcealRow> {
    let mut out: Vec<ConcealRow> = rows
        .iter()
        .filter(|r| r.scenario == Scenario::ConcealRegion)
        .map(|r| ConcealRow {
            variant: r.variant,
            budget: r.budget,
            trial: r.trial,
            start_index: r.start_index,
            region_row: r.target_row,
            region_col: r.target_col,
            status: "ok".into(),
            pre_max: Some(r.clean_value),
            post_max: Some(r.attacked_value),
            reduction: Some(r.induced_deviation),
        })
        .collect();
    for s in skipped.iter().filter(|s| s.scenario == Scenario::ConcealRegion) {
        for &(variant, budget) in pairs {
            out.push(ConcealRow {
                variant,
                budget,
                trial: s.trial,
                start_index: s.start_index,
                region_row: s.row,
                region_col: s.col,
                status: "no-event".into(),
                pre_max: None,
                post_max: None,
                reduction: None,
            });
        }
    }
    out.sort_by(|a, b| (a.trial, a.variant.name(), a.budget.to_bits()).cmp(&(b.trial, b.variant.name(), b.budget.to_bits())));
    out
}

/// Every configured scenario over `variants x budgets`.
pub fn cmd_attack(cfg: &ExperimentConfig, threads: usize) -> Result<CommandMeta> {
    let setup = load_setup(cfg)?;
    let mut rec = Recorder::new("attack", cfg, &cfg.paths.output);
    let grid_scenarios: Vec<Scenario> = cfg.scenarios.iter().copied().filter(|s| *s != Scenario::RerouteTarget).collect();
    let p = pairs(&cfg.variants, &cfg.budgets);
    let out = matrix(cfg, &setup, &grid_scenarios, &p, threads)?;
    rec.csv("attack_trials.csv", &out.rows, TRIAL_COLUMNS)?;
    rec.json("attack_records.json", &out.records)?;
    if grid_scenarios.contains(&Scenario::ConcealRegion) {
        rec.csv("conceal.csv", &conceal_rows(&out.rows, &out.skipped, &p), CONCEAL_COLUMNS)?;
    }
    if cfg.scenarios.contains(&Scenario::RerouteTarget) {
        rec.csv("reroute.csv", &run_reroute(cfg, &setup, threads)?, REROUTE_COLUMNS)?;
    }
    rec.skipped = out.skipped;
    rec.finish()
}

fn non_reroute(cfg: &ExperimentConfig) -> Vec<Scenario> {
    cfg.scenarios.iter().copied().filter(|s| *s != Scenario::RerouteTarget).collect()
}

pub fn cmd_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<CommandMeta> {
    let setup = load_setup(cfg)?;
    let mut rec = Recorder::new("sweep", cfg, &cfg.paths.output);
    let out = matrix(cfg, &setup, &non_reroute(cfg), &pairs(&cfg.sweep_variants, &cfg.budgets), threads)?;
    rec.csv("sweep_trials.csv", &out.rows, TRIAL_COLUMNS)?;
    rec.csv("sweep.csv", &sweep_rows(&out.rows), SWEEP_COLUMNS)?;
    rec.skipped = out.skipped;
    rec.finish()
}

pub fn cmd_ablate(cfg: &ExperimentConfig, threads: usize) -> Result<CommandMeta> {
    let setup = load_setup(cfg)?;
    let mut rec = Recorder::new("ablate", cfg, &cfg.paths.output);
    let cap = cfg.budget_cap();
    let out = matrix(cfg, &setup, &non_reroute(cfg), &pairs(&cfg.variants, &[cap]), threads)?;
    rec.csv("ablation_trials.csv", &out.rows, TRIAL_COLUMNS)?;
    rec.csv("ablation.csv", &ablation_rows(&out.rows, cap), ABLATION_COLUMNS)?;
    rec.skipped = out.skipped;
    rec.finish()
}

pub fn detect_settings(cfg: &ExperimentConfig, setup: &Setup) -> DetectSettings {
    DetectSettings {
        m: 2 * setup.spec.n_cells() * setup.spec.n_vars(),
        alpha: cfg.detection.alpha,
        mc_trials: cfg.detection.mc_trials,
        seed: cfg.seeds().detection,
    }
}

pub fn threshold_of(setup: &Setup) -> impl Fn(Scenario) -> Option<f64> + '_ {
    |s| s.threshold_quantity().and_then(|q| setup.calibration.thresholds.get(q).ok())
}

pub fn cmd_detect(cfg: &ExperimentConfig, threads: usize) -> Result<CommandMeta> {
    let setup = load_setup(cfg)?;
    let mut rec = Recorder::new("detect", cfg, &cfg.paths.output);
    let scenarios: Vec<Scenario> = cfg.scenarios.iter().copied().filter(|s| s.threshold_quantity().is_some()).collect();
    let out = matrix(cfg, &setup, &scenarios, &pairs(&cfg.detect_variants, &cfg.budgets), threads)?;
    let curve = sweep_rows(&out.rows);
    rec.csv("detect_trials.csv", &out.rows, TRIAL_COLUMNS)?;
    rec.csv("detect_curve.csv", &curve, SWEEP_COLUMNS)?;
    let rows = detect_rows(&curve, threshold_of(&setup), detect_settings(cfg, &setup))?;
    rec.csv("detect.csv", &rows, DETECT_COLUMNS)?;
    rec.finish()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub aggregate: String,
    pub trials: String,
    pub trial_rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub files: Vec<String>,
    pub audits: Vec<AuditEntry>,
    pub commands: Vec<CommandMeta>,
}

/// Audit the aggregate CSVs in the output directory and copy everything,
/// with the resolved config and seeds, into `<output>/report`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<CommandMeta> {
    let src = &cfg.paths.output;
    let dst = src.join("report");
    let mut rec = Recorder::new("report", cfg, &dst);
    let cap = cfg.budget_cap();
    let mut audits = Vec::new();
    let mut check = |agg: &str, trials: &str, n: Result<usize>| -> Result<()> {
        audits.push(AuditEntry {
            aggregate: agg.into(),
            trials: trials.into(),
            trial_rows: n?,
        });
        Ok(())
    };
    let exists = |f: &str| src.join(f).exists();
    if exists("sweep.csv") {
        check(
            "sweep.csv",
            "sweep_trials.csv",
            audit(&src.join("sweep_trials.csv"), &src.join("sweep.csv"), SWEEP_COLUMNS, sweep_rows),
        )?;
    }
    if exists("ablation.csv") {
        check(
            "ablation.csv",
            "ablation_trials.csv",
            audit(&src.join("ablation_trials.csv"), &src.join("ablation.csv"), ABLATION_COLUMNS, |r| {
                ablation_rows(r, cap)
            }),
        )?;
    }
    if exists("detect_curve.csv") {
        check(
            "detect_curve.csv",
            "detect_trials.csv",
            audit(
                &src.join("detect_trials.csv"),
                &src.join("detect_curve.csv"),
                SWEEP_COLUMNS,
                sweep_rows,
            ),
        )?;
    }
    let mut commands = Vec::new();
    let mut files = Vec::new();
    for name in [
        "attack_trials.csv",
        "attack_records.json",
        "conceal.csv",
        "reroute.csv",
        "sweep_trials.csv",
        "sweep.csv",
        "ablation_trials.csv",
        "ablation.csv",
        "detect_trials.csv",
        "detect_curve.csv",
        "detect.csv",
    ] {
        if exists(name) {
            io::write_atomic(&dst.join(name), &std::fs::read(src.join(name))?)?;
            files.push(name.to_string());
        }
    }
    for c in ["attack", "sweep", "ablate", "detect"] {
        let p = src.join(format!("{c}.meta.json"));
        if p.exists() {
            commands.push(io::read_json::<CommandMeta>(&p)?);
        }
    }
    if files.is_empty() {
        return Err(HarnessError::Data(advobs_core::Error::InsufficientData(format!(
            "no experiment outputs in {}",
            src.display()
        ))));
    }
    let report = Report {
        config: cfg.clone(),
        seeds: cfg.seeds(),
        files,
        audits,
        commands,
    };
    rec.json("report.json", &report)?;
    rec.outputs.extend(report.files.iter().cloned());
    rec.finish()
}
