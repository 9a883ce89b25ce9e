use advobs_core::inference::{forecast_approx, forecast_approx_vjp, median_field, member_rng, UnrollTape};
use advobs_core::model::{denoiser_vjp, DenoiserParams, NoiseSchedule};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SHAPE: (usize, usize, usize) = (4, 6, 2);

fn setup(seed: u64) -> (DenoiserParams, Array3<f64>, Array3<f64>, Array3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DenoiserParams::init(SHAPE.2, 10, NoiseSchedule::default(), &mut rng);
    p.w3.mapv_inplace(|w| w * 10.0);
    let mut f = || Array3::from_shape_simple_fn(SHAPE, || rng.sample::<f64, _>(StandardNormal));
    (p, f(), f(), f())
}

fn inner(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn replay_with(p: &DenoiserParams, tape: &UnrollTape, prev: &Array3<f64>, cur: &Array3<f64>) -> Array3<f64> {
    let mut t = tape.clone();
    t.x_prev = prev.clone();
    t.x_cur = cur.clone();
    t.replay(p).unwrap()
}

fn check_fd(j: usize, n: usize, probes: usize) {
    let (p, prev, cur, cot) = setup(100 + (j * 10 + n) as u64);
    let (_, tape) = forecast_approx(&p, &prev.view(), &cur.view(), j, n, &mut member_rng(1, 0)).unwrap();
    assert_eq!(tape.n_calls(), j * n);
    let (gp, gc) = forecast_approx_vjp(&p, &tape, &cot.view()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for probe in 0..probes {
        // random direction in both inputs
        let dp = Array3::from_shape_simple_fn(SHAPE, || rng.sample::<f64, _>(StandardNormal));
        let dc = if probe % 2 == 0 {
            dp.mapv(|_| 0.0)
        } else {
            Array3::from_shape_simple_fn(SHAPE, || rng.sample::<f64, _>(StandardNormal))
        };
        let f = |s: f64| inner(&replay_with(&p, &tape, &(&prev + &(s * &dp)), &(&cur + &(s * &dc))), &cot);
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let an = inner(&gp, &dp) + inner(&gc, &dc);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        assert!(err < 1e-4, "j={j} n={n} probe {probe}: fd {fd} vs {an} (rel {err:.1e})");
    }
}

#[test]
fn approx_gradient_matches_finite_differences_on_grid_of_step_counts() {
    for j in 1..=2 {
        for n in 1..=3 {
            check_fd(j, n, 10);
        }
    }
}

#[test]
fn approx_gradient_fifty_probes_two_leads_two_steps() {
    check_fd(2, 2, 50);
}

#[test]
fn single_call_vjp_is_the_denoiser_vjp() {
    let (p, prev, cur, cot) = setup(7);
    let (_, tape) = forecast_approx(&p, &prev.view(), &cur.view(), 1, 1, &mut member_rng(4, 0)).unwrap();
    let (gp, gc) = forecast_approx_vjp(&p, &tape, &cot.view()).unwrap();
    let lead = &tape.leads[0];
    let (ep, ec, _) = denoiser_vjp(
        &p,
        &prev.view(),
        &cur.view(),
        &lead.initial_noise.view(),
        lead.sigmas[0],
        &cot.view(),
    )
    .unwrap();
    for (a, b) in gp.iter().zip(&ep).chain(gc.iter().zip(&ec)) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn median_is_monotone_in_each_member(
        vals in proptest::collection::vec(-10.0f64..10.0, 5 * 6),
        member in 0usize..5,
        cell in 0usize..6,
        bump in 0.0f64..5.0,
    ) {
        let members: Vec<Array3<f64>> = (0..5)
            .map(|m| Array3::from_shape_vec((1, 6, 1), vals[m * 6..(m + 1) * 6].to_vec()).unwrap())
            .collect();
        let base = median_field(&members.iter().collect::<Vec<_>>()).unwrap();
        let mut raised = members.clone();
        raised[member][[0, cell, 0]] += bump;
        let after = median_field(&raised.iter().collect::<Vec<_>>()).unwrap();
        prop_assert!(after[[0, cell, 0]] >= base[[0, cell, 0]]);
    }
}
