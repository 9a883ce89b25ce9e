//! Dataset, model and calibration artifacts, and loading them back.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use advobs_core::climatology::{build_climatology, estimate_background_error, BackgroundError, Climatology, ExtremeThresholds};
use advobs_core::grid::{GridSpec, VariableStats, PRECIPITATION, TEMPERATURE};
use advobs_core::inference::{forecast_ensemble, ForecastConfig};
use advobs_core::io;
use advobs_core::model::{load_params, save_params, train, DenoiserParams, ModelHeader, NoiseSchedule, TrainConfig};
use advobs_core::synth::{load_trajectory, save_trajectory, simulate, split_dataset, Trajectory, TrajectoryManifest};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Scalars measured once per trained model and shared by every attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub background: BackgroundError,
    /// `sigma_b` per variable in normalized units.
    pub sigma_b: Vec<f64>,
    pub thresholds: ExtremeThresholds,
}

pub fn sidecar(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn grid_spec(cfg: &ExperimentConfig) -> Result<GridSpec> {
    Ok(GridSpec::with_default_variables(cfg.data.n_lat, cfg.data.n_lon)?)
}

/// Simulate `train_years + eval_years` synthetic years into `paths.dataset`.
pub fn simulate_dataset(cfg: &ExperimentConfig) -> Result<Trajectory> {
    let spec = grid_spec(cfg)?;
    let years = cfg.data.train_years + cfg.data.eval_years;
    let traj = simulate(&spec, &cfg.data.synth, cfg.seeds().simulate, years * cfg.data.synth.period)?;
    save_trajectory(&cfg.paths.dataset, &traj, Some(&cfg.data.synth))?;
    Ok(traj)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(TrajectoryManifest, Trajectory, Trajectory)> {
    let manifest_path = cfg.paths.dataset.join("manifest.json");
    if !manifest_path.exists() {
        return Err(HarnessError::Data(advobs_core::Error::InsufficientData(format!(
            "no dataset at {}; run `simulate` first",
            cfg.paths.dataset.display()
        ))));
    }
    let (manifest, traj) = load_trajectory(&cfg.paths.dataset)?;
    let (tr, ev) = split_dataset(&traj, cfg.data.train_years, cfg.data.eval_years)?;
    Ok((manifest, tr, ev))
}

fn normalized(traj: &Trajectory, stats: &VariableStats) -> Result<Vec<Array3<f64>>> {
    Ok(traj
        .frames
        .iter()
        .map(|f| stats.normalize_values(&f.view()))
        .collect::<advobs_core::Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub wall_clock_secs: f64,
}

/// Train the denoiser on the train split and calibrate it on the eval split.
pub fn train_and_calibrate(cfg: &ExperimentConfig) -> Result<(TrainSummary, Calibration)> {
    let start = Instant::now();
    let seeds = cfg.seeds();
    let (_, train_traj, eval_traj) = load_dataset(cfg)?;
    let stats = train_traj.fit_stats()?;
    let train_n = normalized(&train_traj, &stats)?;
    let spec = &train_traj.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.model_init);
    let init = DenoiserParams::init(spec.n_vars(), cfg.model.hidden, NoiseSchedule::default(), &mut rng);
    let tc = TrainConfig {
        seed: seeds.training,
        ..cfg.model.training.clone()
    };
    let out = train(&init, &train_n, &tc)?;
    let stem = &cfg.paths.model;
    save_params(stem, &out.params, Some(seeds.training))?;
    io::write_json(&sidecar(stem, ".stats.json"), &stats)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss"])?;
    for (i, l) in out.loss_curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    io::write_atomic(
        &sidecar(stem, ".loss.csv"),
        &w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?,
    )?;

    let calibration = calibrate(cfg, &out.params, &stats, &train_traj, &eval_traj)?;
    io::write_json(&sidecar(stem, ".calibration.json"), &calibration)?;
    let c = &out.loss_curve;
    let summary = TrainSummary {
        iterations: c.len(),
        first_loss: c.first().copied().unwrap_or(f64::NAN),
        last_loss: c.last().copied().unwrap_or(f64::NAN),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((summary, calibration))
}

/// Thresholds from the train years; background error of the one-step
/// ensemble median on the eval split.
pub fn calibrate(
    cfg: &ExperimentConfig,
    params: &DenoiserParams,
    stats: &VariableStats,
    train_traj: &Trajectory,
    eval_traj: &Trajectory,
) -> Result<Calibration> {
    let years = train_traj.years();
    let clim = build_climatology(&years)?;
    let thresholds = ExtremeThresholds::compute(&train_traj.spec, &years, &clim, &["wind-speed", TEMPERATURE, PRECIPITATION])?;
    let eval_n = normalized(eval_traj, stats)?;
    let fc = ForecastConfig {
        lead_steps: 1,
        n_full: cfg.n_full,
        ensemble_size: cfg.ensemble_size,
        seed: cfg.seeds().training,
    };
    let background = estimate_background_error(&eval_n, stats, cfg.model.background_stride, |a, b| {
        Ok(forecast_ensemble(params, a, b, &fc)?.remove(0))
    })?;
    Ok(Calibration {
        sigma_b: background.std_normalized(),
        background,
        thresholds,
    })
}

/// Everything an attack experiment reads.
pub struct Setup {
    pub spec: Arc<GridSpec>,
    pub header: ModelHeader,
    pub params: DenoiserParams,
    pub stats: VariableStats,
    pub calibration: Calibration,
    pub climatology: Climatology,
    /// Raw eval trajectory (for valid-day lookups).
    pub eval_traj: Trajectory,
    /// Normalized eval states.
    pub eval: Vec<Array3<f64>>,
}

pub fn load_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let stem = &cfg.paths.model;
    if !stem.with_extension("json").exists() {
        return Err(HarnessError::Data(advobs_core::Error::InsufficientData(format!(
            "no model at {}; run `train` first",
            stem.display()
        ))));
    }
    let (_, train_traj, eval_traj) = load_dataset(cfg)?;
    let (header, params) = load_params(stem)?;
    let stats: VariableStats = io::read_json(&sidecar(stem, ".stats.json"))?;
    let calibration: Calibration = io::read_json(&sidecar(stem, ".calibration.json"))?;
    if params.n_vars != train_traj.spec.n_vars() || calibration.sigma_b.len() != params.n_vars {
        return Err(HarnessError::Data(advobs_core::Error::ShapeMismatch {
            expected: format!("{} variables", train_traj.spec.n_vars()),
            got: format!("model with {}", params.n_vars),
        }));
    }
    let climatology = build_climatology(&train_traj.years())?;
    let eval = normalized(&eval_traj, &stats)?;
    Ok(Setup {
        spec: train_traj.spec.clone(),
        header,
        params,
        stats,
        calibration,
        climatology,
        eval_traj,
        eval,
    })
}
