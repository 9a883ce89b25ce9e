//! Experiment configuration: a JSON document whose every field has a default.

use std::path::{Path, PathBuf};

use advobs_core::attack::{Aggregation, Variant, DEFAULT_TAU};
use advobs_core::detect::DEFAULT_ALPHA;
use advobs_core::model::TrainConfig;
use advobs_core::synth::SynthParams;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FabricateWind,
    FabricateTemp,
    FabricatePrecip,
    ConcealRegion,
    RerouteTarget,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::FabricateWind,
        Scenario::FabricateTemp,
        Scenario::FabricatePrecip,
        Scenario::ConcealRegion,
        Scenario::RerouteTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FabricateWind => "fabricate-wind",
            Scenario::FabricateTemp => "fabricate-temp",
            Scenario::FabricatePrecip => "fabricate-precip",
            Scenario::ConcealRegion => "conceal-region",
            Scenario::RerouteTarget => "reroute-target",
        }
    }

    /// Position in `ALL`; selects the RNG stream of the scenario's trials.
    pub fn index(self) -> u64 {
        Self::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }

    /// Quantity whose extreme threshold defines a successful fabrication.
    pub fn threshold_quantity(self) -> Option<&'static str> {
        match self {
            Scenario::FabricateWind => Some("wind-speed"),
            Scenario::FabricateTemp => Some(advobs_core::grid::TEMPERATURE),
            Scenario::FabricatePrecip => Some(advobs_core::grid::PRECIPITATION),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the simulated trajectory.
    pub dataset: PathBuf,
    /// Model stem; `.bin`, `.json`, `.stats.json`, `.calibration.json` and
    /// `.loss.csv` are written next to it.
    pub model: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "work/dataset".into(),
            model: "work/model/denoiser".into(),
            output: "work/out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub train_years: usize,
    pub eval_years: usize,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_lat: 16,
            n_lon: 32,
            train_years: 10,
            eval_years: 3,
            synth: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// `seed` inside is ignored; the training seed is derived from the master seed.
    pub training: TrainConfig,
    /// Forecast every `background_stride` steps of the eval split when
    /// estimating the background error.
    pub background_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            training: TrainConfig::default(),
            background_stride: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcealConfig {
    /// `wind-speed` or a variable name.
    pub quantity: String,
    pub region_rows: usize,
    pub region_cols: usize,
    /// A trial qualifies when the clean regional maximum exceeds the
    /// climatological regional maximum of its valid day by more than this.
    pub trigger_anomaly: f64,
}

impl Default for ConcealConfig {
    fn default() -> Self {
        Self {
            quantity: "wind-speed".into(),
            region_rows: 3,
            region_cols: 4,
            trigger_anomaly: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerouteConfig {
    /// Storm intensity proxy: lowered in region A, raised in region B.
    pub quantity: String,
    /// Variable whose minimum locates the storm at each lead step.
    pub track_variable: String,
    pub region_rows: usize,
    pub region_cols: usize,
    /// Column offset of region B from region A (wraps).
    pub shift_cols: usize,
}

impl Default for RerouteConfig {
    fn default() -> Self {
        Self {
            quantity: "wind-speed".into(),
            track_variable: advobs_core::grid::PRESSURE.into(),
            region_rows: 3,
            region_cols: 3,
            shift_cols: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub alpha: f64,
    /// Monte-Carlo trials behind each empirical power; 0 disables it.
    pub mc_trials: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            mc_trials: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    /// Master seed; every other seed is derived from it (see `Seeds`).
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub scenarios: Vec<Scenario>,
    /// Strictly increasing; the last entry is the budget cap.
    pub budgets: Vec<f64>,
    pub trials: usize,
    pub ensemble_size: usize,
    pub lead_steps: usize,
    pub approx_steps: usize,
    pub n_full: usize,
    pub iterations: usize,
    pub beta: f64,
    pub tau: f64,
    pub aggregation: Aggregation,
    /// Variants run by `attack` and tabulated by `ablate`.
    pub variants: Vec<Variant>,
    /// Variants swept over every budget by `sweep`.
    pub sweep_variants: Vec<Variant>,
    /// Variants whose minimum budget `detect` searches.
    pub detect_variants: Vec<Variant>,
    pub conceal: ConcealConfig,
    pub reroute: RerouteConfig,
    pub detection: DetectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            scenarios: vec![Scenario::FabricateWind, Scenario::FabricateTemp, Scenario::FabricatePrecip],
            budgets: vec![0.0002, 0.000375, 0.0007, 0.00133, 0.0025],
            trials: 20,
            ensemble_size: 5,
            lead_steps: 4,
            approx_steps: 2,
            n_full: 20,
            iterations: 50,
            beta: 0.9,
            tau: DEFAULT_TAU,
            aggregation: Aggregation::MedianField,
            variants: vec![Variant::Full, Variant::NoSteps, Variant::NoApprox, Variant::NoBoth],
            sweep_variants: vec![Variant::Full, Variant::NoBoth],
            detect_variants: vec![Variant::Full, Variant::NoBoth],
            conceal: ConcealConfig::default(),
            reroute: RerouteConfig::default(),
            detection: DetectConfig::default(),
        }
    }
}

/// Seeds derived from the master seed: consecutive outputs of
/// `ChaCha8Rng::seed_from_u64(master)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub simulate: u64,
    pub model_init: u64,
    pub training: u64,
    pub trials: u64,
    pub detection: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            master,
            simulate: rng.next_u64(),
            model_init: rng.next_u64(),
            training: rng.next_u64(),
            trials: rng.next_u64(),
            detection: rng.next_u64(),
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn budget_cap(&self) -> f64 {
        *self.budgets.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.n_lat < 4 || d.n_lon < 4 {
            return Err(field("data.n_lat", "grid needs n_lat >= 4 and n_lon >= 4"));
        }
        if d.train_years < 2 {
            return Err(field("data.train_years", "at least 2 years are needed for the climatology"));
        }
        if d.eval_years < 1 {
            return Err(field("data.eval_years", "must be >= 1"));
        }
        d.synth.validate().map_err(|e| field("data.synth", e.to_string()))?;
        if self.model.hidden == 0 {
            return Err(field("model.hidden", "must be >= 1"));
        }
        self.model.training.validate().map_err(|e| field("model.training", e.to_string()))?;
        if self.model.background_stride == 0 {
            return Err(field("model.background_stride", "must be >= 1"));
        }
        if self.scenarios.is_empty() {
            return Err(field("scenarios", "list at least one scenario"));
        }
        if self.budgets.is_empty() {
            return Err(field("budgets", "list at least one budget"));
        }
        if self.budgets.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(field("budgets", "budgets must be non-negative and finite"));
        }
        if self.budgets.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(field("budgets", "sweep must be strictly increasing"));
        }
        if self.trials == 0 {
            return Err(field("trials", "must be >= 1"));
        }
        for (name, v) in [
            ("ensemble_size", self.ensemble_size),
            ("lead_steps", self.lead_steps),
            ("approx_steps", self.approx_steps),
            ("n_full", self.n_full),
            ("iterations", self.iterations),
        ] {
            if v == 0 {
                return Err(field(name, "must be >= 1"));
            }
        }
        if self.approx_steps > self.n_full {
            return Err(field("approx_steps", format!("must not exceed n_full = {}", self.n_full)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(field("beta", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) {
            return Err(field("tau", "must be positive"));
        }
        for (name, list) in [
            ("variants", &self.variants),
            ("sweep_variants", &self.sweep_variants),
            ("detect_variants", &self.detect_variants),
        ] {
            if list.is_empty() {
                return Err(field(name, "list at least one variant"));
            }
        }
        let c = &self.conceal;
        if c.region_rows == 0 || c.region_cols == 0 || c.region_rows > d.n_lat || c.region_cols > d.n_lon {
            return Err(field("conceal.region_rows", "region must fit the grid"));
        }
        let r = &self.reroute;
        if r.region_rows == 0 || r.region_cols == 0 || r.region_rows > d.n_lat || r.region_cols > d.n_lon {
            return Err(field("reroute.region_rows", "region must fit the grid"));
        }
        if r.shift_cols == 0 || r.shift_cols >= d.n_lon {
            return Err(field("reroute.shift_cols", "must lie in 1..n_lon"));
        }
        if !(self.detection.alpha > 0.0 && self.detection.alpha < 1.0) {
            return Err(field("detection.alpha", "must lie in (0, 1)"));
        }
        Ok(())
    }
}
