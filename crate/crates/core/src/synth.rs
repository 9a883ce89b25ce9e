//! Synthetic multi-year weather trajectories.
//!
//! Each variable owns a two-scale Lorenz-96 lattice: on every latitude row a
//! ring of slow amplitudes runs along the periodic longitude axis, and each
//! slow cell drives `fast_per_slow` fast amplitudes. Slow amplitudes are
//! diffused across latitude rows, nudged toward the mean of the other
//! variables, and forced by `forcing + seasonal_amplitude * sin(2 pi t / period)`
//! with opposite phase in the two hemispheres. Additive noise enters every
//! substep (Euler-Maruyama on top of an RK4 deterministic step).
//!
//! Slow amplitudes map to raw variables with fixed affine maps; the
//! precipitation-like variable is a scaled softplus so it is never negative.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, VariableStats, WeatherState, PRECIPITATION};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Mean Lorenz-96 forcing.
    pub forcing: f64,
    /// Amplitude of the sinusoidal seasonal forcing.
    pub seasonal_amplitude: f64,
    /// Nudging strength toward the mean of the other variables.
    pub var_coupling: f64,
    /// Diffusion strength between neighbouring latitude rows.
    pub lat_coupling: f64,
    /// Slow/fast coupling `h`.
    pub fast_coupling: f64,
    /// Time-scale ratio `c` of the fast variables.
    pub fast_timescale: f64,
    /// Amplitude ratio `b` of the fast variables.
    pub fast_amplitude: f64,
    pub fast_per_slow: usize,
    /// Steps per synthetic year.
    pub period: usize,
    /// Model time advanced by one output step.
    pub step_time: f64,
    /// RK4 substep.
    pub substep: f64,
    /// Standard deviation of the stochastic forcing per unit model time.
    pub noise: f64,
    /// Output steps integrated and discarded before time index 0.
    pub spinup_steps: usize,
    /// Spread of the random initial slow state around `forcing`.
    pub init_spread: f64,
    /// Magnitude cap on any slow/fast amplitude.
    pub blowup_cap: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            forcing: 10.0,
            seasonal_amplitude: 2.0,
            var_coupling: 0.1,
            lat_coupling: 0.2,
            fast_coupling: 0.5,
            fast_timescale: 4.0,
            fast_amplitude: 4.0,
            fast_per_slow: 4,
            period: 180,
            step_time: 0.05,
            substep: 0.01,
            noise: 0.1,
            spinup_steps: 200,
            init_spread: 1.0,
            blowup_cap: 1e3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.period < 20 {
            return bad("period must be at least 20 steps");
        }
        if !(self.substep > 0.0) || !(self.step_time > 0.0) {
            return bad("substep and step_time must be positive");
        }
        if self.seasonal_amplitude < 0.0 || self.noise < 0.0 || self.init_spread < 0.0 {
            return bad("amplitudes must be nonnegative");
        }
        if self.fast_per_slow == 0 || !(self.fast_timescale > 0.0) || !(self.fast_amplitude > 0.0) {
            return bad("fast scale parameters must be positive");
        }
        Ok(())
    }

    fn substeps_per_step(&self) -> usize {
        (self.step_time / self.substep).round().max(1.0) as usize
    }
}

/// Raw-unit states at consecutive time indices.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub spec: Arc<GridSpec>,
    pub seed: u64,
    pub period: usize,
    pub start_time: i64,
    /// Raw fields, `frames[i]` at time `start_time + i`.
    pub frames: Vec<Array3<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn time_of(&self, i: usize) -> i64 {
        self.start_time + i as i64
    }

    pub fn day_of_year(&self, i: usize) -> usize {
        self.time_of(i).rem_euclid(self.period as i64) as usize
    }

    pub fn full_years(&self) -> usize {
        self.frames.len() / self.period
    }

    /// Normalized state of frame `i`.
    pub fn state(&self, i: usize, stats: &VariableStats) -> Result<WeatherState> {
        let values = stats.normalize_values(&self.frames[i].view())?;
        WeatherState::new(self.spec.clone(), values, self.time_of(i))
    }

    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            spec: self.spec.clone(),
            seed: self.seed,
            period: self.period,
            start_time: self.time_of(start),
            frames: self.frames[start..end].to_vec(),
        }
    }

    /// Consecutive full years as separate trajectories.
    pub fn years(&self) -> Vec<Trajectory> {
        (0..self.full_years())
            .map(|y| self.slice(y * self.period, (y + 1) * self.period))
            .collect()
    }

    pub fn fit_stats(&self) -> Result<VariableStats> {
        VariableStats::fit(self.frames.iter().map(|f| f.view()))
    }
}

/// Latent lattice state: slow `(var, lat, lon)` and fast `(var, lat, lon * J)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub slow: Array3<f64>,
    pub fast: Array3<f64>,
}

impl LatentState {
    pub fn zeros(spec: &GridSpec, params: &SynthParams) -> Self {
        let (nl, nc, nv) = spec.shape();
        Self {
            slow: Array3::zeros((nv, nl, nc)),
            fast: Array3::zeros((nv, nl, nc * params.fast_per_slow)),
        }
    }

    fn random(spec: &GridSpec, params: &SynthParams, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Self::zeros(spec, params);
        for x in s.slow.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = params.forcing + params.init_spread * z;
        }
        for y in s.fast.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *y = 0.1 * params.init_spread * z;
        }
        s
    }
}

struct Dynamics<'a> {
    p: &'a SynthParams,
    nv: usize,
    nl: usize,
    nc: usize,
    nj: usize,
    // hemisphere sign of the seasonal phase per latitude row
    phase_sign: Vec<f64>,
    // periodic neighbour tables: (k-2, k-1, k+1) on the slow ring, (j-1, j+1, j+2) on the fast ring
    slow_nb: Vec<[usize; 3]>,
    fast_nb: Vec<[usize; 3]>,
}

impl<'a> Dynamics<'a> {
    fn new(spec: &GridSpec, p: &'a SynthParams) -> Self {
        let (nl, nc, nv) = spec.shape();
        Self {
            p,
            nv,
            nl,
            nc,
            nj: nc * p.fast_per_slow,
            phase_sign: (0..nl).map(|r| if spec.lat_of(r) >= 0.0 { 1.0 } else { -1.0 }).collect(),
            slow_nb: ring_neighbours(nc),
            fast_nb: ring_neighbours(nc * p.fast_per_slow)
                .into_iter()
                .map(|[_, jm1, jp1]| [jm1, jp1, (jp1 + 1) % (nc * p.fast_per_slow)])
                .collect(),
        }
    }

    fn tendency(&self, t: f64, s: &LatentState, ds: &mut LatentState) {
        let p = self.p;
        let (nv, nl, nc, nj) = (self.nv, self.nl, self.nc, self.nj);
        let j_per = p.fast_per_slow;
        let hcb = p.fast_coupling * p.fast_timescale / p.fast_amplitude;
        let cb = p.fast_timescale * p.fast_amplitude;
        let season = (2.0 * std::f64::consts::PI * t / p.period as f64).sin();
        let x = s.slow.as_slice().expect("standard layout");
        let y = s.fast.as_slice().expect("standard layout");
        let dx = ds.slow.as_slice_mut().expect("standard layout");
        let dy = ds.fast.as_slice_mut().expect("standard layout");
        let plane = nl * nc;
        for r in 0..nl {
            let forcing = p.forcing + p.seasonal_amplitude * self.phase_sign[r] * season;
            let up = if r + 1 < nl { r + 1 } else { r };
            let down = if r > 0 { r - 1 } else { r };
            for k in 0..nc {
                let col_sum: f64 = (0..nv).map(|w| x[w * plane + r * nc + k]).sum();
                for v in 0..nv {
                    let row = &x[v * plane + r * nc..v * plane + (r + 1) * nc];
                    let xk = row[k];
                    let [km2, km1, kp1] = self.slow_nb[k];
                    let (xm2, xm1, xp1) = (row[km2], row[km1], row[kp1]);
                    let fy = &y[(v * nl + r) * nj + k * j_per..(v * nl + r) * nj + (k + 1) * j_per];
                    let fast_sum: f64 = fy.iter().sum();
                    let lat = x[v * plane + up * nc + k] + x[v * plane + down * nc + k] - 2.0 * xk;
                    let other = if nv > 1 { (col_sum - xk) / (nv - 1) as f64 } else { xk };
                    dx[v * plane + r * nc + k] =
                        xm1 * (xp1 - xm2) - xk + forcing - hcb * fast_sum + p.lat_coupling * lat + p.var_coupling * (other - xk);
                }
            }
            for v in 0..nv {
                let base = (v * nl + r) * nj;
                let yr = &y[base..base + nj];
                let xr = &x[v * plane + r * nc..v * plane + (r + 1) * nc];
                let dyr = &mut dy[base..base + nj];
                for j in 0..nj {
                    let [jm1, jp1, jp2] = self.fast_nb[j];
                    let (ym1, yp1, yp2) = (yr[jm1], yr[jp1], yr[jp2]);
                    dyr[j] = -cb * yp1 * (yp2 - ym1) - p.fast_timescale * yr[j] + hcb * xr[j / j_per];
                }
            }
        }
    }

    fn rk4(&self, t: f64, dt: f64, s: &mut LatentState, k: &mut [LatentState; 4], tmp: &mut LatentState) {
        self.tendency(t, s, &mut k[0]);
        combine(tmp, s, &k[0], 0.5 * dt);
        self.tendency(t + 0.5 * dt, tmp, &mut k[1]);
        combine(tmp, s, &k[1], 0.5 * dt);
        self.tendency(t + 0.5 * dt, tmp, &mut k[2]);
        combine(tmp, s, &k[2], dt);
        self.tendency(t + dt, tmp, &mut k[3]);
        let w = dt / 6.0;
        ndarray::Zip::from(&mut s.slow)
            .and(&k[0].slow)
            .and(&k[1].slow)
            .and(&k[2].slow)
            .and(&k[3].slow)
            .for_each(|x, a, b, c, d| *x += w * (a + 2.0 * b + 2.0 * c + d));
        ndarray::Zip::from(&mut s.fast)
            .and(&k[0].fast)
            .and(&k[1].fast)
            .and(&k[2].fast)
            .and(&k[3].fast)
            .for_each(|y, a, b, c, d| *y += w * (a + 2.0 * b + 2.0 * c + d));
    }
}

fn ring_neighbours(n: usize) -> Vec<[usize; 3]> {
    (0..n).map(|k| [(k + n - 2) % n, (k + n - 1) % n, (k + 1) % n]).collect()
}

fn combine(out: &mut LatentState, base: &LatentState, k: &LatentState, h: f64) {
    ndarray::Zip::from(&mut out.slow)
        .and(&base.slow)
        .and(&k.slow)
        .for_each(|o, b, d| *o = b + h * d);
    ndarray::Zip::from(&mut out.fast)
        .and(&base.fast)
        .and(&k.fast)
        .for_each(|o, b, d| *o = b + h * d);
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Maps slow amplitudes of variable `v` (by name) to raw units.
fn to_raw(name: &str, x: f64) -> f64 {
    match name {
        "u-wind" => 1.5 * x,
        "v-wind" => 1.5 * x - 3.0,
        "temperature" => 285.0 + 2.0 * x,
        PRECIPITATION => 3.0 * softplus(x - 4.0),
        "pressure" => 1010.0 + 3.0 * x,
        _ => x,
    }
}

pub fn raw_field(spec: &GridSpec, latent: &LatentState) -> Array3<f64> {
    let (nl, nc, nv) = spec.shape();
    Array3::from_shape_fn((nl, nc, nv), |(r, c, v)| to_raw(&spec.variables[v].name, latent.slow[[v, r, c]]))
}

/// Integrate from a given latent state; frame 0 is `init` itself at time 0.
pub fn simulate_from(
    spec: &GridSpec,
    params: &SynthParams,
    init: LatentState,
    seed: u64,
    n_steps: usize,
) -> Result<(Vec<Array3<f64>>, LatentState)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a7e);
    let dyns = Dynamics::new(spec, params);
    let mut state = init;
    let mut k = [
        LatentState::zeros(spec, params),
        LatentState::zeros(spec, params),
        LatentState::zeros(spec, params),
        LatentState::zeros(spec, params),
    ];
    let mut tmp = LatentState::zeros(spec, params);
    let nsub = params.substeps_per_step();
    let dt = params.step_time / nsub as f64;
    let noise_scale = params.noise * dt.sqrt();
    let mut frames = Vec::with_capacity(n_steps);
    frames.push(raw_field(spec, &state));
    for step in 1..n_steps {
        for sub in 0..nsub {
            let t = (step - 1) as f64 + sub as f64 / nsub as f64;
            dyns.rk4(t, dt, &mut state, &mut k, &mut tmp);
            if noise_scale > 0.0 {
                for x in state.slow.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += noise_scale * z;
                }
            }
        }
        let cap = params.blowup_cap;
        if state.slow.iter().chain(state.fast.iter()).any(|x| !x.is_finite() || x.abs() > cap) {
            return Err(Error::NumericalBlowup(format!("latent amplitude exceeded {cap} at step {step}")));
        }
        frames.push(raw_field(spec, &state));
    }
    Ok((frames, state))
}

/// Spin up from a seeded random state, then record `n_steps` frames at time
/// indices `0..n_steps`.
pub fn simulate(spec: &GridSpec, params: &SynthParams, seed: u64, n_steps: usize) -> Result<Trajectory> {
    simulate_perturbed(spec, params, seed, n_steps, None)
}

/// As [`simulate`], with an optional additive kick `(var, lat, lon, amount)`
/// on the slow state right after spin-up.
pub fn simulate_perturbed(
    spec: &GridSpec,
    params: &SynthParams,
    seed: u64,
    n_steps: usize,
    kick: Option<(usize, usize, usize, f64)>,
) -> Result<Trajectory> {
    if n_steps < 2 {
        return Err(Error::InvalidParameter("n_steps must be at least 2".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = LatentState::random(spec, params, &mut rng);
    let spin_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let (_, mut state) = simulate_from(spec, params, init, spin_seed, params.spinup_steps + 1)?;
    if let Some((v, r, c, amount)) = kick {
        state.slow[[v, r, c]] += amount;
    }
    let (frames, _) = simulate_from(spec, params, state, seed, n_steps)?;
    Ok(Trajectory {
        spec: Arc::new(spec.clone()),
        seed,
        period: params.period,
        start_time: 0,
        frames,
    })
}

/// Train years from the start and the following eval years, on year
/// boundaries.
pub fn split_dataset(traj: &Trajectory, train_years: usize, eval_years: usize) -> Result<(Trajectory, Trajectory)> {
    let need = (train_years + eval_years) * traj.period;
    if train_years == 0 || eval_years == 0 || traj.len() < need {
        return Err(Error::InsufficientData(format!(
            "need {} full years ({need} steps), trajectory has {} steps",
            train_years + eval_years,
            traj.len()
        )));
    }
    let cut = train_years * traj.period;
    Ok((traj.slice(0, cut), traj.slice(cut, need)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub spec: GridSpec,
    pub params: Option<SynthParams>,
    pub seed: u64,
    pub period: usize,
    pub start_time: i64,
    pub n_steps: usize,
    pub year_files: Vec<String>,
}

/// One state file per (possibly partial trailing) year plus `manifest.json`.
pub fn save_trajectory(dir: &Path, traj: &Trajectory, params: Option<&SynthParams>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (y, chunk) in traj.frames.chunks(traj.period).enumerate() {
        let name = format!("year_{y:03}");
        let states: Vec<WeatherState> = chunk
            .iter()
            .enumerate()
            .map(|(i, f)| WeatherState {
                spec: traj.spec.clone(),
                values: f.clone(),
                time_index: traj.time_of(y * traj.period + i),
            })
            .collect();
        io::write_states(&dir.join(&name), &states, None)?;
        files.push(name);
    }
    let manifest = TrajectoryManifest {
        spec: (*traj.spec).clone(),
        params: params.cloned(),
        seed: traj.seed,
        period: traj.period,
        start_time: traj.start_time,
        n_steps: traj.len(),
        year_files: files,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_trajectory(dir: &Path) -> Result<(TrajectoryManifest, Trajectory)> {
    let manifest: TrajectoryManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut frames = Vec::with_capacity(manifest.n_steps);
    for f in &manifest.year_files {
        let (_, states) = io::read_states(&dir.join(f))?;
        frames.extend(states.into_iter().map(|s| s.values));
    }
    if frames.len() != manifest.n_steps {
        return Err(Error::InsufficientData(format!(
            "manifest lists {} steps, files hold {}",
            manifest.n_steps,
            frames.len()
        )));
    }
    let traj = Trajectory {
        spec: Arc::new(manifest.spec.clone()),
        seed: manifest.seed,
        period: manifest.period,
        start_time: manifest.start_time,
        frames,
    };
    Ok((manifest, traj))
}

/// Lag-1 autocorrelation of variable `v`, pooled over cells.
pub fn lag1_autocorrelation(frames: &[Array3<f64>], v: usize) -> f64 {
    let n = frames.len();
    let mean = frames.iter().map(|f| f.index_axis(Axis(2), v).sum()).sum::<f64>() / (n * frames[0].dim().0 * frames[0].dim().1) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, f) in frames.iter().enumerate() {
        let a = f.index_axis(Axis(2), v);
        den += a.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        if i + 1 < n {
            let b = frames[i + 1].index_axis(Axis(2), v);
            num += a.iter().zip(b.iter()).map(|(x, y)| (x - mean) * (y - mean)).sum::<f64>();
        }
    }
    num / den
}

/// RMSE of predicting each frame by the previous one, over all normalized values.
pub fn persistence_rmse(frames: &[Array3<f64>], stats: &VariableStats) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for w in frames.windows(2) {
        for (((_, _, v), a), b) in w[0].indexed_iter().zip(w[1].iter()) {
            let d = (a - b) / stats.std[v];
            acc += d * d;
            n += 1;
        }
    }
    (acc / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GridSpec {
        GridSpec::with_default_variables(8, 16).unwrap()
    }

    #[test]
    fn zero_forcing_zero_state_stays_zero() {
        let spec = small_spec();
        let params = SynthParams {
            forcing: 0.0,
            seasonal_amplitude: 0.0,
            noise: 0.0,
            ..SynthParams::default()
        };
        let init = LatentState::zeros(&spec, &params);
        let (frames, last) = simulate_from(&spec, &params, init, 1, 30).unwrap();
        assert_eq!(frames.len(), 30);
        assert!(last.slow.iter().chain(last.fast.iter()).all(|x| *x == 0.0));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let spec = small_spec();
        let p = SynthParams::default();
        let a = simulate(&spec, &p, 11, 50).unwrap();
        let b = simulate(&spec, &p, 11, 50).unwrap();
        let c = simulate(&spec, &p, 12, 50).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn precipitation_is_nonnegative() {
        let spec = small_spec();
        let t = simulate(&spec, &SynthParams::default(), 3, 100).unwrap();
        let v = spec.var_index(PRECIPITATION).unwrap();
        assert!(t.frames.iter().all(|f| f.index_axis(Axis(2), v).iter().all(|x| *x >= 0.0)));
    }

    #[test]
    fn blowup_is_reported() {
        let spec = small_spec();
        let p = SynthParams {
            blowup_cap: 5.0,
            ..SynthParams::default()
        };
        assert!(matches!(simulate(&spec, &p, 1, 10), Err(Error::NumericalBlowup(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let spec = small_spec();
        let p = SynthParams {
            period: 10,
            ..SynthParams::default()
        };
        assert!(simulate(&spec, &p, 1, 10).is_err());
        assert!(simulate(&spec, &SynthParams::default(), 1, 1).is_err());
    }

    #[test]
    fn split_on_year_boundaries() {
        let spec = GridSpec::with_default_variables(4, 4).unwrap();
        let p = SynthParams {
            period: 20,
            spinup_steps: 5,
            ..SynthParams::default()
        };
        let t = simulate(&spec, &p, 5, 200).unwrap();
        let (train, eval) = split_dataset(&t, 8, 2).unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(eval.len(), 40);
        assert_eq!(eval.frames[..], t.frames[160..]);
        assert_eq!(train.start_time % 20, 0);
        assert_eq!(eval.start_time % 20, 0);
        let short = t.slice(0, 20);
        assert!(matches!(split_dataset(&short, 8, 2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn trajectory_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::with_default_variables(4, 4).unwrap();
        let p = SynthParams {
            period: 20,
            spinup_steps: 5,
            ..SynthParams::default()
        };
        let t = simulate(&spec, &p, 5, 50).unwrap();
        save_trajectory(dir.path(), &t, Some(&p)).unwrap();
        let (m, back) = load_trajectory(dir.path()).unwrap();
        assert_eq!(m.year_files.len(), 3);
        assert_eq!(back.frames, t.frames);
        assert_eq!(m.params.unwrap(), p);
    }
}
