//! Single-step denoising training with SGD + momentum.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::DenoiserParams;
use super::schedule::sample_noise;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub sigma_data: f64,
    pub seed: u64,
    /// Grid cells scored per training example; `None` scores every cell.
    pub cells_per_sample: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 16,
            iterations: 3000,
            sigma_data: 1.0,
            seed: 0,
            cells_per_sample: Some(64),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "learning rate must be >= 0, iterations and batch size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.sigma_data > 0.0) {
            return Err(Error::InvalidParameter("momentum in [0,1), sigma_data > 0".into()));
        }
        Ok(())
    }
}

/// `(sigma^2 + sd^2) / (sigma sd)^2`, i.e. `1 / c_out^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// A training example: the target state and its two predecessors.
#[derive(Clone, Copy, Debug)]
pub struct Triple<'a> {
    pub prev: &'a Array3<f64>,
    pub cur: &'a Array3<f64>,
    pub next: &'a Array3<f64>,
}

/// Consecutive triples of a normalized sequence.
pub fn triples(states: &[Array3<f64>]) -> Vec<Triple<'_>> {
    states
        .windows(3)
        .map(|w| Triple {
            prev: &w[0],
            cur: &w[1],
            next: &w[2],
        })
        .collect()
}

/// Weighted denoising loss and its parameter gradient for one example.
pub fn example_loss_grad(
    params: &DenoiserParams,
    t: Triple<'_>,
    sigma: f64,
    noise: &Array3<f64>,
    cells: &[usize],
) -> (f64, DenoiserParams) {
    let z = t.next + noise;
    let (d, cache) = params.forward_cells(&t.prev.view(), &t.cur.view(), &z.view(), sigma, cells);
    let nlon = t.next.dim().1;
    let nv = params.n_vars;
    let w = loss_weight(sigma, params.sigma_data);
    let count = (cells.len() * nv) as f64;
    let mut cot = Array2::zeros(d.dim());
    let mut loss = 0.0;
    for (i, &cell) in cells.iter().enumerate() {
        let (r, c) = (cell / nlon, cell % nlon);
        for v in 0..nv {
            let e = d[[i, v]] - t.next[[r, c, v]];
            loss += w * e * e;
            cot[[i, v]] = 2.0 * w * e / count;
        }
    }
    (loss / count, params.param_backward(&cache, &cot))
}

/// Mean weighted loss over fixed `(triple, sigma, noise)` draws, all cells.
pub fn evaluate_loss(params: &DenoiserParams, data: &[Triple<'_>], sigmas: &[f64], noises: &[Array3<f64>]) -> f64 {
    let mut total = 0.0;
    for ((t, s), n) in data.iter().zip(sigmas).zip(noises) {
        let z = t.next + n;
        let cells: Vec<usize> = (0..t.next.dim().0 * t.next.dim().1).collect();
        let (d, _) = params.forward_cells(&t.prev.view(), &t.cur.view(), &z.view(), *s, &cells);
        let nlon = t.next.dim().1;
        let w = loss_weight(*s, params.sigma_data);
        let mut acc = 0.0;
        for (i, &cell) in cells.iter().enumerate() {
            for v in 0..params.n_vars {
                let e = d[[i, v]] - t.next[[cell / nlon, cell % nlon, v]];
                acc += w * e * e;
            }
        }
        total += acc / (cells.len() * params.n_vars) as f64;
    }
    total / data.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub loss_curve: Vec<f64>,
}

/// Minimise the weighted single-step denoising loss with SGD + momentum.
/// Each example draws `sigma ~ Sigma(0, 1)` and `Z = X^{t+1} + N(0, sigma^2)`.
pub fn train(init: &DenoiserParams, data: &[Array3<f64>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let examples = triples(data);
    if examples.len() < config.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training triples for batch size {}",
            examples.len(),
            config.batch_size
        )));
    }
    let mut params = init.clone();
    params.sigma_data = config.sigma_data;
    let shape = examples[0].next.dim();
    let n_cells = shape.0 * shape.1;
    let per_sample = config.cells_per_sample.unwrap_or(n_cells).min(n_cells);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = vec![0.0; params.n_params()];
    let mut curve = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut grad = vec![0.0; params.n_params()];
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let t = examples[rng.random_range(0..examples.len())];
            let sigma = params.schedule.sample_sigma(0.0, 1.0, &mut rng)?;
            let noise = sample_noise(shape, sigma, &mut rng);
            let cells = if per_sample == n_cells {
                (0..n_cells).collect()
            } else {
                let mut c = sample(&mut rng, n_cells, per_sample).into_vec();
                c.sort_unstable();
                c
            };
            let (loss, g) = example_loss_grad(&params, t, sigma, &noise, &cells);
            batch_loss += loss;
            for (a, b) in grad.iter_mut().zip(g.flat()) {
                *a += b;
            }
        }
        let scale = 1.0 / config.batch_size as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            return Err(Error::NumericalBlowup(format!("training loss diverged at iteration {it}")));
        }
        if let Some(clip) = config.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let mut flat = params.flat();
        for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = config.momentum * *v + g;
            *p -= config.learning_rate * *v;
        }
        params.set_flat(&flat)?;
        curve.push(batch_loss);
    }
    params.validate()?;
    Ok(TrainOutcome { params, loss_curve: curve })
}
