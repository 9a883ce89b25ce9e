//! End-to-end acceptance checks at desk scale. Each test prints one
//! PASS/FAIL line to stderr (uncaptured) before asserting.
//!
//! The default pipeline (simulate, train, calibrate) runs once per process;
//! the paired attack matrix shared by the effectiveness, ablation and
//! detectability checks is also computed once.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use advobs_core::attack::{project, variable_moments, Variant};
use advobs_core::detect::{analytic_power, monte_carlo_power};
use advobs_core::inference::{
    forecast_approx, forecast_approx_vjp, forecast_approx_with, forecast_ensemble, forecast_full, full_sigmas, member_rng, ForecastConfig,
    SigmaSampling, UnrollTape,
};
use advobs_core::model::{denoiser_forward, denoiser_vjp, DenoiserParams};
use advobs_harness::commands::{cmd_simulate, cmd_train, detect_settings, threshold_of};
use advobs_harness::experiment::{run_matrix, TrialRow};
use advobs_harness::pipeline::{load_setup, Setup};
use advobs_harness::report::{detect_rows, sweep_rows};
use advobs_harness::{ExperimentConfig, Scenario};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    setup: Setup,
    train_secs: f64,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.paths.dataset = dir.path().join("dataset");
        cfg.paths.model = dir.path().join("model/denoiser");
        cfg.paths.output = dir.path().join("out");
        let t = Instant::now();
        cmd_simulate(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        let setup = load_setup(&cfg).unwrap();
        Fixture {
            _dir: dir,
            cfg,
            setup,
            train_secs,
        }
    })
}

const FABRICATE: [Scenario; 3] = [Scenario::FabricateWind, Scenario::FabricateTemp, Scenario::FabricatePrecip];

struct Matrix {
    rows: Vec<TrialRow>,
    secs: f64,
}

/// full and no-both over every budget; no-steps and no-approx at the cap.
fn matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let f = fixture();
        let cap = f.cfg.budget_cap();
        let mut pairs: Vec<(Variant, f64)> = Vec::new();
        for v in [Variant::Full, Variant::NoBoth] {
            pairs.extend(f.cfg.budgets.iter().map(|&b| (v, b)));
        }
        pairs.push((Variant::NoSteps, cap));
        pairs.push((Variant::NoApprox, cap));
        let t = Instant::now();
        let mut rows = Vec::new();
        for s in FABRICATE {
            rows.extend(run_matrix(&f.cfg, &f.setup, s, &pairs, 1).unwrap().rows);
        }
        Matrix {
            rows,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

/// Deviations of `(scenario, variant, budget)` indexed by trial.
fn devs(rows: &[TrialRow], s: Scenario, v: Variant, b: f64) -> Vec<f64> {
    let mut r: Vec<&TrialRow> = rows.iter().filter(|r| r.scenario == s && r.variant == v && r.budget == b).collect();
    r.sort_by_key(|r| r.trial);
    r.iter().map(|r| r.induced_deviation).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[test]
fn projection_suite() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let epsilons = [1e-4, 0.0025, 0.1, 10.0];
    let (mut worst_mu, mut worst_excess, mut worst_idem) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for k in 0..10_000 {
        let eps = epsilons[k % 4];
        let scale = 10f64.powf(rng.random_range(-5.0..3.0));
        let offset = rng.random_range(-50.0..50.0);
        let d = Array3::from_shape_simple_fn((8, 16, 5), || offset + scale * rng.random_range(-1.0..1.0));
        let p = project(&d.view(), eps);
        for (mu, sd) in variable_moments(&p.view()) {
            worst_mu = worst_mu.max(mu.abs());
            worst_excess = worst_excess.max(sd - eps);
        }
        let pp = project(&p.view(), eps);
        for (a, b) in p.iter().zip(&pp) {
            worst_idem = worst_idem.max((a - b).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_mu <= 1e-9 && worst_excess <= 1e-9 && worst_idem <= 1e-12 && secs < 10.0;
    verdict(
        "projection suite",
        pass,
        format!("10^4 fields, max |mu| {worst_mu:.1e}, max sigma - eps {worst_excess:.1e}, idempotence {worst_idem:.1e}, {secs:.1}s"),
    );
}

fn inner(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    // Box-Muller keeps this file free of a distributions dependency
    Array3::from_shape_simple_fn(shape, || {
        let (u, v): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    })
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

fn replay_with(p: &DenoiserParams, tape: &UnrollTape, prev: &Array3<f64>, cur: &Array3<f64>) -> Array3<f64> {
    let mut t = tape.clone();
    t.x_prev = prev.clone();
    t.x_cur = cur.clone();
    t.replay(p).unwrap()
}

#[test]
fn gradient_suite() {
    let f = fixture();
    let p = &f.setup.params;
    let shape = f.setup.eval[0].dim();
    let (prev, cur) = (&f.setup.eval[100], &f.setup.eval[101]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut probes = 0;
    // denoiser VJP w.r.t. both conditioning fields and the noisy input
    let sigmas = [0.03, 0.3, 1.0, 5.0, 40.0];
    for k in 0..50 {
        let sigma = sigmas[k % sigmas.len()];
        let z = gaussian(shape, &mut rng) * sigma + cur;
        let cot = gaussian(shape, &mut rng);
        let (gp, gc, gz) = denoiser_vjp(p, &prev.view(), &cur.view(), &z.view(), sigma, &cot.view()).unwrap();
        let (dp, dc, dz) = (gaussian(shape, &mut rng), gaussian(shape, &mut rng), gaussian(shape, &mut rng));
        let g = |s: f64| {
            let out = denoiser_forward(
                p,
                &(prev + &(s * &dp)).view(),
                &(cur + &(s * &dc)).view(),
                &(&z + &(s * &dz)).view(),
                sigma,
            )
            .unwrap();
            inner(&out, &cot)
        };
        let fd = (g(h) - g(-h)) / (2.0 * h);
        worst = worst.max(rel_err(fd, inner(&gp, &dp) + inner(&gc, &dc) + inner(&gz, &dz)));
        probes += 1;
    }
    // unrolled approximate rollouts
    for j in 1..=2 {
        for n in 1..=2 {
            let (_, tape) = forecast_approx(p, &prev.view(), &cur.view(), j, n, &mut member_rng(3, j * 2 + n)).unwrap();
            let cot = gaussian(shape, &mut rng);
            let (gp, gc) = forecast_approx_vjp(p, &tape, &cot.view()).unwrap();
            for _ in 0..25 {
                let (dp, dc) = (gaussian(shape, &mut rng), gaussian(shape, &mut rng));
                let g = |s: f64| inner(&replay_with(p, &tape, &(prev + &(s * &dp)), &(cur + &(s * &dc))), &cot);
                let fd = (g(h) - g(-h)) / (2.0 * h);
                worst = worst.max(rel_err(fd, inner(&gp, &dp) + inner(&gc, &dc)));
                probes += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "gradient suite",
        worst < 1e-4 && probes >= 150 && secs < 120.0,
        format!("{probes} central-difference probes on the trained model, worst relative error {worst:.2e}, {secs:.1}s"),
    );
}

#[test]
fn sampler_coincidence() {
    let f = fixture();
    let p = &f.setup.params;
    let (prev, cur) = (&f.setup.eval[7], &f.setup.eval[8]);
    let cfg = ForecastConfig {
        ensemble_size: 1,
        ..ForecastConfig::default()
    };
    let full = forecast_full(p, &prev.view(), &cur.view(), &cfg, &mut member_rng(11, 0)).unwrap();
    let (approx, tape) = forecast_approx_with(
        p,
        &prev.view(),
        &cur.view(),
        cfg.lead_steps,
        cfg.n_full,
        SigmaSampling::MidQuantile,
        &mut member_rng(11, 0),
    )
    .unwrap();
    let want = full_sigmas(p, cfg.n_full);
    let sigmas_equal = tape.leads.iter().all(|l| l.sigmas == want);
    let bitwise = approx.iter().zip(full.last().unwrap()).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        "sampler coincidence",
        sigmas_equal && bitwise,
        format!(
            "n = n_full = {} over {} leads: sigma sequences equal {sigmas_equal}, output bit-identical {bitwise}",
            cfg.n_full, cfg.lead_steps
        ),
    );
}

#[test]
fn forecast_skill() {
    let f = fixture();
    let s = &f.setup;
    let t = Instant::now();
    let nv = s.spec.n_vars();
    let fc = ForecastConfig::default();
    let leads = [1usize, 4];
    let mut se_model = vec![vec![0.0; nv]; 2];
    let mut se_clim = vec![vec![0.0; nv]; 2];
    let starts: Vec<usize> = (0..30).map(|k| k * (s.eval.len() - 8) / 30).collect();
    for (i, &st) in starts.iter().enumerate() {
        let cfg = ForecastConfig {
            seed: i as u64,
            ..fc.clone()
        };
        let median = forecast_ensemble(&s.params, &s.eval[st].view(), &s.eval[st + 1].view(), &cfg).unwrap();
        for (li, &lead) in leads.iter().enumerate() {
            let k = st + 1 + lead;
            let truth = &s.eval[k];
            let clim = s
                .stats
                .normalize_values(&s.climatology.mean[s.eval_traj.day_of_year(k)].view())
                .unwrap();
            for v in 0..nv {
                let tv = truth.index_axis(Axis(2), v);
                let err = |x: &Array3<f64>| (&x.index_axis(Axis(2), v) - &tv).mapv(|e| e * e).mean().unwrap();
                se_model[li][v] += err(&median[lead - 1]);
                se_clim[li][v] += err(&clim);
            }
        }
    }
    let n = starts.len() as f64;
    let rmse = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { x.iter().map(|r| r.iter().map(|e| (e / n).sqrt()).collect()).collect() };
    let (m, c) = (rmse(&se_model), rmse(&se_clim));
    let beats = (0..2).all(|l| (0..nv).all(|v| m[l][v] < c[l][v]));
    let secs = t.elapsed().as_secs_f64() + f.train_secs;
    let fmt = |x: &[f64]| x.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        "forecast skill",
        beats && secs < 900.0,
        format!(
            "normalized RMSE lead 1 {} vs climatology {}; lead 4 {} vs {}; {secs:.0}s incl. simulate+train",
            fmt(&m[0]),
            fmt(&c[0]),
            fmt(&m[1]),
            fmt(&c[1])
        ),
    );
}

#[test]
fn attack_effectiveness() {
    let f = fixture();
    let m = matrix();
    let cap = f.cfg.budget_cap();
    let mut pass = m.secs < 7200.0;
    let mut detail = Vec::new();
    for s in FABRICATE {
        let curve: Vec<Vec<f64>> = f.cfg.budgets.iter().map(|&b| devs(&m.rows, s, Variant::Full, b)).collect();
        let at_cap = mean(curve.last().unwrap());
        // paired increments between neighbouring budgets must not fall below
        // two standard errors
        let mut monotone = true;
        for w in curve.windows(2) {
            let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            let mu = mean(&d);
            let sd = (d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (d.len() - 1).max(1) as f64).sqrt();
            monotone &= mu >= -2.0 * sd / (d.len() as f64).sqrt();
        }
        let full = devs(&m.rows, s, Variant::Full, cap);
        let base = devs(&m.rows, s, Variant::NoApprox, cap);
        let wins = full.iter().zip(&base).filter(|(a, b)| a > b).count();
        let ok = at_cap > 0.0 && monotone && wins * 10 >= 7 * full.len();
        pass &= ok;
        let means: Vec<String> = curve.iter().map(|c| format!("{:.4}", mean(c))).collect();
        detail.push(format!(
            "{}: curve [{}], non-decreasing {monotone}, beats no-approx {wins}/{}",
            s.name(),
            means.join(", "),
            full.len()
        ));
    }
    verdict("attack effectiveness", pass, format!("{}; {:.0}s", detail.join("; "), m.secs));
}

#[test]
fn ablation_ordering() {
    let f = fixture();
    let m = matrix();
    let cap = f.cfg.budget_cap();
    let mut pass = true;
    let mut detail = Vec::new();
    for s in FABRICATE {
        let get = |v| mean(&devs(&m.rows, s, v, cap));
        let (full, steps, approx, both) = (
            get(Variant::Full),
            get(Variant::NoSteps),
            get(Variant::NoApprox),
            get(Variant::NoBoth),
        );
        let ok = full >= steps && steps >= both && approx < full;
        pass &= ok;
        detail.push(format!(
            "{}: full {full:.4} no-steps {steps:.4} no-both {both:.4} no-approx {approx:.4}{}",
            s.name(),
            if ok { "" } else { " (out of order)" }
        ));
    }
    verdict("ablation ordering", pass, detail.join("; "));
}

#[test]
fn detector_calibration() {
    let t = Instant::now();
    let alpha = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut size_exact = true;
    for m in [256usize, 2560] {
        size_exact &= analytic_power(m, 1.0, 0.0, alpha) == alpha;
        for eps in [0.0, 0.0025, 0.01, 0.05] {
            let a = analytic_power(m, 1.0, eps, alpha);
            let mc = monte_carlo_power(m, 1.0, eps, alpha, 10_000, &mut rng).unwrap();
            worst = worst.max((a - mc).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "detector calibration",
        worst <= 0.02 && size_exact && secs < 300.0,
        format!(
            "max |analytic - Monte Carlo| {:.2} pp over 8 cells of 10^4 trials, size exact {size_exact}, {secs:.1}s",
            100.0 * worst
        ),
    );
}

#[test]
fn detectability_ordering() {
    let f = fixture();
    let m = matrix();
    let sweep = sweep_rows(
        &m.rows
            .iter()
            .filter(|r| matches!(r.variant, Variant::Full | Variant::NoBoth))
            .cloned()
            .collect::<Vec<_>>(),
    );
    let rows = detect_rows(&sweep, threshold_of(&f.setup), detect_settings(&f.cfg, &f.setup)).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for s in FABRICATE {
        let get = |v| rows.iter().find(|r| r.scenario == s && r.variant == v).unwrap();
        let (a, b) = (get(Variant::Full), get(Variant::NoBoth));
        let ok = matches!((a.analytic_power, b.analytic_power), (Some(x), Some(y)) if x < y);
        pass &= ok;
        let show = |r: &advobs_harness::report::DetectRow| match (r.min_budget, r.analytic_power) {
            (Some(e), Some(p)) => format!("eps* {e:.3} power {p:.4} (miss {:.1e})", 1.0 - p),
            _ => r.status.clone(),
        };
        detail.push(format!("{}: full {} vs no-both {}", s.name(), show(a), show(b)));
    }
    verdict("detectability ordering", pass, detail.join("; "));
}

#[test]
fn concealment() {
    let f = fixture();
    let cap = f.cfg.budget_cap();
    let out = run_matrix(&f.cfg, &f.setup, Scenario::ConcealRegion, &[(Variant::Full, cap)], 1).unwrap();
    let reduced = out.rows.iter().filter(|r| r.attacked_value < r.clean_value).count();
    let n = out.rows.len();
    verdict(
        "concealment",
        n > 0 && reduced * 10 >= 8 * n,
        format!(
            "regional max reduced in {reduced}/{n} qualifying trials ({} of {} trials had no event)",
            out.skipped.len(),
            f.cfg.trials
        ),
    );
}

fn csv_bodies(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "paths": {"dataset": "data", "model": "model/denoiser", "output": "out"},
        "data": {"n_lat": 6, "n_lon": 8, "train_years": 3, "eval_years": 1},
        "model": {"hidden": 16, "training": {"iterations": 200}, "background_stride": 20},
        "scenarios": ["fabricate-wind", "fabricate-temp", "fabricate-precip", "conceal-region", "reroute-target"],
        "budgets": [0.001, 0.0025],
        "trials": 2, "ensemble_size": 3, "lead_steps": 2, "n_full": 6, "iterations": 5,
        "detection": {"mc_trials": 200}
    });
    std::fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
    let run_all = || {
        for c in ["simulate", "train", "attack", "sweep", "ablate", "detect", "report"] {
            let st = Command::new(env!("CARGO_BIN_EXE_advobs"))
                .args([c, "--config", "config.json", "--seed", "5"])
                .current_dir(dir.path())
                .output()
                .unwrap();
            assert!(st.status.success(), "{c}: {}", String::from_utf8_lossy(&st.stderr));
        }
        csv_bodies(dir.path())
    };
    let first = run_all();
    let second = run_all();
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let identical = first == second;
    verdict(
        "reproducibility",
        identical && names.len() >= 12,
        format!("{} CSV files byte-identical across reruns: {identical}", names.len()),
    );
}
