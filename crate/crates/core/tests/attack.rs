use advobs_core::attack::*;
use advobs_core::grid::{GridSpec, Quantity, SpatialMask, VariableStats};
use advobs_core::inference::member_rng;
use advobs_core::model::{DenoiserParams, NoiseSchedule};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_field(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn assert_constraints(p: &Array3<f64>, eps: f64) {
    for (mu, sd) in variable_moments(&p.view()) {
        assert!(mu.abs() <= 1e-9, "mean {mu}");
        assert!(sd <= eps + 1e-9, "std {sd} > {eps}");
    }
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_feasible(
        seed in any::<u64>(),
        log_eps in -4.0f64..1.0,
        scale in 1e-3f64..1e3,
        offset in -50.0f64..50.0,
    ) {
        let eps = 10f64.powf(log_eps);
        let d = random_field((4, 6, 3), seed).mapv(|x| x * scale + offset);
        let p = project(&d.view(), eps);
        assert_constraints(&p, eps);
        let pp = project(&p.view(), eps);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn projection_is_scale_equivariant_below_budget(seed in any::<u64>(), c in 0.01f64..1.0) {
        let d = project(&random_field((3, 5, 2), seed).view(), 1.0);
        // centred with std <= 1, so c * d has std <= c <= eps = 1
        let lhs = project(&(&d * c).view(), 1.0);
        let rhs = project(&d.view(), 1.0) * c;
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn spec() -> GridSpec {
    GridSpec::with_default_variables(5, 6).unwrap()
}

fn stats() -> VariableStats {
    VariableStats::new(vec![1.0, -2.0, 285.0, 1.5, 1010.0], vec![4.0, 3.0, 5.0, 1.2, 6.0]).unwrap()
}

fn functionals(spec: &GridSpec) -> Vec<Functional> {
    let wind = Quantity::wind(spec).unwrap();
    vec![
        Functional::NegateMin { quantity: wind },
        Functional::NegateMaxDeviation {
            quantity: Quantity::Variable(2),
        },
        Functional::MinimizeMax { quantity: wind },
        Functional::MinimizeRegionMean {
            quantity: Quantity::Variable(3),
        },
        Functional::TargetValue {
            quantity: Quantity::Variable(4),
            sign: -1.0,
        },
    ]
}

#[test]
fn loss_gradients_match_finite_differences() {
    let spec = spec();
    let stats = stats();
    let mut cells = ndarray::Array2::from_elem((5, 6), false);
    for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 5)] {
        cells[[r, c]] = true;
    }
    let mask = SpatialMask::from_cells(cells).unwrap();
    let mode = Smoothing::Soft { tau: DEFAULT_TAU };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, f) in functionals(&spec).into_iter().enumerate() {
        let loss = AdversarialLoss::single(mask.clone(), f);
        let x = random_field(spec.shape(), 40 + k as u64);
        let (_, g) = loss.value_and_grad(&x.view(), &stats, mode).unwrap();
        for _ in 0..20 {
            let dir = Array3::from_shape_simple_fn(spec.shape(), || rng.sample::<f64, _>(StandardNormal));
            let h = 1e-7;
            let fp = loss.eval(&(&x + &(h * &dir)).view(), &stats, mode).unwrap();
            let fm = loss.eval(&(&x - &(h * &dir)).view(), &stats, mode).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "{f:?}: fd {fd} vs {an}");
        }
    }
    let composite = AdversarialLoss {
        terms: vec![
            LossTerm {
                weight: 1.0,
                mask: SpatialMask::single(&spec, 0, 0).unwrap(),
                functional: functionals(&spec)[2],
            },
            LossTerm {
                weight: 1.0,
                mask: SpatialMask::single(&spec, 4, 3).unwrap(),
                functional: functionals(&spec)[0],
            },
        ],
    };
    let x = random_field(spec.shape(), 77);
    let (v, _) = composite.value_and_grad(&x.view(), &stats, Smoothing::Hard).unwrap();
    let raw = stats.denormalize_values(&x.view()).unwrap();
    let w = Quantity::wind(&spec).unwrap();
    assert!((v - (w.at(&raw.view(), 0, 0) - w.at(&raw.view(), 4, 3))).abs() < 1e-12);
}

#[test]
fn soft_min_converges_to_hard_min() {
    let spec = spec();
    let stats = stats();
    let loss = AdversarialLoss::single(SpatialMask::full(&spec), functionals(&spec)[0]);
    let x = random_field(spec.shape(), 3);
    let hard = loss.eval(&x.view(), &stats, Smoothing::Hard).unwrap();
    let gaps: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&tau| (loss.eval(&x.view(), &stats, Smoothing::Soft { tau }).unwrap() - hard).abs())
        .collect();
    assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
    assert!(gaps[2] < 0.01);
}

struct Setup {
    params: DenoiserParams,
    stats: VariableStats,
    sigma_b: Vec<f64>,
    prev: Array3<f64>,
    cur: Array3<f64>,
}

fn setup(zero: bool) -> Setup {
    let spec = spec();
    let params = if zero {
        DenoiserParams::zeros(5, 8, NoiseSchedule::default())
    } else {
        DenoiserParams::init(5, 8, NoiseSchedule::default(), &mut ChaCha8Rng::seed_from_u64(1))
    };
    Setup {
        params,
        stats: stats(),
        sigma_b: vec![0.1, 0.2, 0.1, 0.3, 0.1],
        prev: random_field(spec.shape(), 5),
        cur: random_field(spec.shape(), 6),
    }
}

impl Setup {
    fn ctx(&self) -> AttackContext<'_> {
        AttackContext {
            params: &self.params,
            stats: &self.stats,
            sigma_b: &self.sigma_b,
            x_prev: self.prev.view(),
            x_cur: self.cur.view(),
        }
    }
}

fn wind_loss() -> AdversarialLoss {
    let spec = spec();
    AdversarialLoss::single(SpatialMask::single(&spec, 2, 3).unwrap(), functionals(&spec)[0])
}

fn small_config(variant: Variant) -> AttackConfig {
    AttackConfig {
        epsilon: 0.05,
        iterations: 6,
        lead_steps: 2,
        approx_steps: 2,
        variant,
        seed: 4,
        ..AttackConfig::default()
    }
}

#[test]
fn every_variant_is_deterministic_and_feasible() {
    let s = setup(false);
    for v in Variant::ALL {
        let cfg = small_config(v);
        let (a, log) = attack(&s.ctx(), &wind_loss(), &cfg).unwrap();
        let (b, _) = attack(&s.ctx(), &wind_loss(), &cfg).unwrap();
        assert_eq!(a, b, "{v:?}");
        assert_eq!(log.loss.len(), 6);
        assert_constraints(&a.delta_t, cfg.epsilon);
        assert_constraints(&a.delta_tm1, cfg.epsilon);
        assert!(!a.is_zero(), "{v:?} produced no perturbation");
    }
}

#[test]
fn insensitive_model_gives_zero_perturbation() {
    let s = setup(true);
    let (p, _) = attack(&s.ctx(), &wind_loss(), &small_config(Variant::Full)).unwrap();
    assert!(p.is_zero());
}

#[test]
fn single_iteration_takes_one_projected_step() {
    let s = setup(false);
    let cfg = AttackConfig {
        iterations: 1,
        epsilon: 1e3,
        ..small_config(Variant::Full)
    };
    let (p, log) = attack(&s.ctx(), &wind_loss(), &cfg).unwrap();
    assert!((log.step_sizes[0] * (1.0 - cfg.beta) - 2.0 * cfg.epsilon).abs() < 1e-9);
    // with a huge budget the projection only centres, so delta = -alpha (1 - beta) Pi_1(g)
    for (_, sd) in variable_moments(&p.delta_t.view()) {
        assert!(sd <= 2.0 * cfg.epsilon * (1.0 + 1e-12));
    }
}

#[test]
fn induced_deviation_of_zero_perturbation_is_zero() {
    let s = setup(false);
    let loss = wind_loss();
    let fc = advobs_core::inference::ForecastConfig {
        lead_steps: 2,
        n_full: 4,
        ensemble_size: 3,
        seed: 1,
    };
    let mut ev = DeviationEvaluator::new(s.ctx(), &loss, fc, Aggregation::MedianField);
    assert_eq!(ev.induced_deviation(&Perturbation::zeros(s.cur.dim())).unwrap(), 0.0);
    let (p, _) = attack(&s.ctx(), &loss, &small_config(Variant::Full)).unwrap();
    let d = ev.induced_deviation(&p).unwrap();
    let (clean, _) = ev.clean().unwrap().clone();
    let (att, _) = ev.score(&p).unwrap();
    assert_eq!(d, clean - att);
}

#[test]
fn rollout_variant_call_counts() {
    let s = setup(false);
    // the tape of one n = 1 rollout has j calls
    let (_, tape) = advobs_core::inference::forecast_approx(&s.params, &s.prev.view(), &s.cur.view(), 3, 1, &mut member_rng(0, 0)).unwrap();
    assert_eq!(tape.n_calls(), 3);
    let base = small_config(Variant::Full);
    let both = base.with_variant(Variant::NoBoth);
    let steps = base.with_variant(Variant::NoSteps);
    let approx = base.with_variant(Variant::NoApprox);
    assert_eq!(both.effective(), (steps.effective().0, approx.effective().1));
    assert_eq!(both.step_size(3), steps.step_size(3));
}
