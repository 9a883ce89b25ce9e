//! The conditional denoiser `d`, its noise machinery and its training loop.

pub mod network;
pub mod schedule;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use network::{
    c_in, c_out, c_skip, denoise_step, denoiser_forward, denoiser_vjp, param_grad, step_backward, step_with, Activations, Conditioning,
    DenoiserParams,
};
pub use schedule::{sample_noise, NoiseSchedule};
pub use train::{train, TrainConfig, TrainOutcome};

use crate::error::{shape_err, Result};
use crate::io;

/// JSON header stored next to the flat parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub n_vars: usize,
    pub hidden: usize,
    pub n_features: usize,
    /// `(name, rows, cols)` in file order; biases have `cols = 1`.
    pub layers: Vec<(String, usize, usize)>,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub training_seed: Option<u64>,
    pub layout: String,
}

impl ModelHeader {
    pub fn describe(p: &DenoiserParams, training_seed: Option<u64>) -> Self {
        let h = p.hidden;
        Self {
            n_vars: p.n_vars,
            hidden: h,
            n_features: p.n_features(),
            layers: vec![
                ("w1".into(), p.n_features(), h),
                ("b1".into(), h, 1),
                ("w2".into(), h, h),
                ("b2".into(), h, 1),
                ("w3".into(), h, p.n_vars),
                ("b3".into(), p.n_vars, 1),
            ],
            schedule: p.schedule,
            sigma_data: p.sigma_data,
            training_seed,
            layout: "f64-le, tensors concatenated in `layers` order, each row-major".into(),
        }
    }
}

/// Write `<stem>.bin` (weights) and `<stem>.json` (header).
pub fn save_params(stem: &Path, p: &DenoiserParams, training_seed: Option<u64>) -> Result<()> {
    let bin = stem.with_extension("bin");
    io::write_f64s(&bin, p.flat())?;
    io::write_json(&stem.with_extension("json"), &ModelHeader::describe(p, training_seed))
}

pub fn load_params(stem: &Path) -> Result<(ModelHeader, DenoiserParams)> {
    let header: ModelHeader = io::read_json(&stem.with_extension("json"))?;
    let mut p = DenoiserParams::zeros(header.n_vars, header.hidden, header.schedule);
    p.sigma_data = header.sigma_data;
    if p.n_features() != header.n_features {
        return Err(shape_err(p.n_features(), header.n_features));
    }
    let flat = io::read_f64s(&stem.with_extension("bin"))?;
    p.set_flat(&flat)?;
    p.validate()?;
    Ok((header, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = DenoiserParams::init(5, 16, NoiseSchedule::default(), &mut rng);
        let stem = dir.path().join("model");
        save_params(&stem, &p, Some(7)).unwrap();
        let (h, q) = load_params(&stem).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.training_seed, Some(7));
        assert_eq!(h.layers.iter().map(|(_, r, c)| r * c).sum::<usize>(), p.n_params());
    }
}
