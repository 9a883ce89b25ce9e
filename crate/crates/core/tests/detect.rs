use advobs_core::detect::{analytic_power, chi_square_cdf, chi_square_quantile, chi_square_sf, chi_square_test, monte_carlo_power};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn reference() -> Value {
    serde_json::from_str(include_str!("data/chi2_reference.json")).unwrap()
}

#[test]
fn cdf_and_sf_match_high_precision_reference() {
    let r = reference();
    let probes = r["cdf_sf"].as_array().unwrap();
    assert_eq!(probes.len(), 100);
    for p in probes {
        let (x, k) = (p["x"].as_f64().unwrap(), p["dof"].as_f64().unwrap());
        let (c, s) = (p["cdf"].as_f64().unwrap(), p["sf"].as_f64().unwrap());
        let (gc, gs) = (chi_square_cdf(x, k), chi_square_sf(x, k));
        assert!((gc - c).abs() < 1e-10, "cdf({x}, {k}) = {gc}, want {c}");
        assert!((gs - s).abs() < 1e-10, "sf({x}, {k}) = {gs}, want {s}");
        // the smaller tail is computed directly, so it is also relatively accurate
        let (small, want) = if c < s { (gc, c) } else { (gs, s) };
        if want > 1e-290 {
            assert!(((small - want) / want).abs() < 1e-9, "tail at ({x}, {k}): {small} vs {want}");
        }
    }
}

#[test]
fn quantiles_and_power_match_reference() {
    let r = reference();
    for q in r["quantiles"].as_array().unwrap() {
        let (p, k, x) = (q["p"].as_f64().unwrap(), q["dof"].as_f64().unwrap(), q["x"].as_f64().unwrap());
        let got = chi_square_quantile(p, k);
        assert!((got - x).abs() < 1e-9 * x.max(1.0), "quantile({p}, {k}) = {got}, want {x}");
    }
    for q in r["power"].as_array().unwrap() {
        let m = q["m"].as_u64().unwrap() as usize;
        let (e, a, want) = (
            q["epsilon"].as_f64().unwrap(),
            q["alpha"].as_f64().unwrap(),
            q["power"].as_f64().unwrap(),
        );
        let got = analytic_power(m, 1.0, e, a);
        assert!((got - want).abs() < 1e-9, "power({m}, {e}) = {got}, want {want}");
    }
}

#[test]
fn large_sample_at_nominal_variance_has_median_p_value() {
    // T/(m-1) -> 1 gives p -> 1/2; the chi-square median sits slightly below its mean
    let m = 100_000usize;
    let stat = (m - 1) as f64;
    let p = chi_square_sf(stat, stat);
    assert!((p - 0.5).abs() < 0.005, "{p}");
    let t = chi_square_test(&[1.0, -1.0, 1.0, -1.0], 4.0 / 3.0, 0.05).unwrap();
    assert!((t.statistic - 3.0).abs() < 1e-12);
}

#[test]
fn monte_carlo_size_is_within_binomial_band() {
    let trials = 4000;
    let rate = monte_carlo_power(256, 2.0, 0.0, 0.05, trials, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let band = 3.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
    assert!((rate - 0.05).abs() < band, "{rate}");
    let big = monte_carlo_power(256, 1.0, 3.0, 0.05, 1000, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    assert_eq!(big, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn power_is_monotone_in_epsilon_and_m(
        m in 8usize..6000,
        e in 0.0f64..0.5,
        de in 0.0f64..0.2,
        dm in 1usize..2000,
    ) {
        let base = analytic_power(m, 1.0, e, 0.05);
        prop_assert!(analytic_power(m, 1.0, e + de, 0.05) >= base - 1e-12);
        if e > 0.0 {
            prop_assert!(analytic_power(m + dm, 1.0, e, 0.05) >= base - 1e-12);
        }
        prop_assert!((0.05 - 1e-12..=1.0).contains(&base));
    }
}
