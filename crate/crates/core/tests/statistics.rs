mod common;

use std::convert::Infallible;

use certmark::nn::ParamVector;
use certmark::smoothing::{
    binomial_cdf, certified_lower_bound, empirical_percentile_index, gaussian_cdf, gaussian_quantile, p_lower,
    sample_accuracies, smoothed_trigger_accuracy, AccuracySample, SmoothingConfig,
};
use proptest::prelude::*;

use common::oracle::{binomial_pmf_row, brute_force_index, cdf_from_row, normal_cdf_simpson};

#[test]
fn cdf_matches_numerical_integration() {
    assert!((gaussian_cdf(-1.0) - normal_cdf_simpson(-1.0, 20_000)).abs() < 1e-13);
    for i in 0..=64 {
        let x = -8.0 + 0.25 * i as f64;
        let oracle = normal_cdf_simpson(x, 40_000);
        assert!((gaussian_cdf(x) - oracle).abs() < 1e-12, "x={x}");
    }
}

#[test]
fn binomial_cdf_matches_exact_summation() {
    for &(n, p) in &[(20u64, 0.3), (57, 0.01), (200, 0.5), (333, 0.871), (1000, 0.15866)] {
        let cdf = cdf_from_row(&binomial_pmf_row(n, p));
        for k in 0..=n {
            let want = cdf[k as usize];
            let got = binomial_cdf(n, k, p).unwrap();
            if want > 1e-300 {
                assert!(((got - want) / want).abs() < 1e-10, "n={n} k={k} p={p}: {got} vs {want}");
            } else {
                assert!(got < 1e-290);
            }
        }
    }
}

#[test]
fn index_matches_exhaustive_scan_at_large_n() {
    let p = p_lower(1.0, 1.0);
    assert!((p - 0.15866).abs() < 1e-5);
    let k = empirical_percentile_index(10_000, 0.99, 1.0, 1.0).unwrap();
    assert_eq!(k, brute_force_index(10_000, 0.99, p));
    let k = k.unwrap();
    let sf = |k: u64| 1.0 - binomial_cdf(10_000, k - 1, p).unwrap();
    assert!(sf(k) >= 0.99 && sf(k + 1) < 0.99);
}

#[test]
fn index_matches_exhaustive_scan_over_a_grid() {
    for n in [1u64, 2, 7, 50, 301] {
        for c in [0.6, 0.9, 0.999] {
            for ratio in [0.0, 0.1, 0.7, 2.5] {
                let got = empirical_percentile_index(n, c, 0.5, 0.5 * ratio).unwrap();
                assert_eq!(got, brute_force_index(n, c, p_lower(ratio, 1.0)), "n={n} c={c} ratio={ratio}");
            }
        }
    }
}

#[test]
fn median_estimator_concentrates_at_the_true_median() {
    // Phi of a standard normal draw is uniform, so the true median is 0.5.
    let n = 401u64;
    let std = 1.0 / (2.0 * (n as f64).sqrt());
    let theta = ParamVector::zeros(1);
    let f = |p: &ParamVector| Ok::<_, Infallible>(gaussian_cdf(p.as_slice()[0] as f64));
    let trials = 400;
    let mut inside = 0;
    let mut mean = 0.0;
    for seed in 0..trials {
        let cfg = SmoothingConfig { sigma: 1.0, n, confidence: 0.99, root_seed: seed };
        let m = smoothed_trigger_accuracy(&sample_accuracies(f, &theta, &cfg).unwrap());
        mean += m / trials as f64;
        if (m - 0.5).abs() <= 3.0 * std {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.98 * trials as f64, "{inside}/{trials} within 3 std");
    assert!((mean - 0.5).abs() < 4.0 * std / (trials as f64).sqrt());
}

proptest! {
    #[test]
    fn cdf_is_a_monotone_probability(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (fl, fh) = (gaussian_cdf(lo), gaussian_cdf(hi));
        prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        prop_assert!(fl <= fh);
    }

    #[test]
    fn median_shift_identity(eps in 0.0f64..5.0, sigma in 0.01f64..4.0) {
        let shifted = gaussian_cdf(gaussian_quantile(0.5).unwrap() - eps / sigma);
        prop_assert!((shifted - p_lower(eps, sigma)).abs() < 1e-15);
    }

    #[test]
    fn index_depends_on_the_radius_over_sigma_ratio(n in 1u64..2000, ratio in 0.0f64..3.0, scale in 0.05f64..20.0) {
        let a = empirical_percentile_index(n, 0.99, 1.0, ratio).unwrap();
        let b = empirical_percentile_index(n, 0.99, scale, ratio * scale).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bound_falls_with_radius_and_stays_below_the_median(
        values in prop::collection::vec(0.0f64..=1.0, 1..300),
        e1 in 0.0f64..2.0,
        e2 in 0.0f64..2.0,
    ) {
        let n = values.len() as u64;
        let samples = AccuracySample::from_values(values, 0, 1.0).unwrap();
        let cfg = SmoothingConfig { sigma: 1.0, n, confidence: 0.9, root_seed: 0 };
        let (near, far) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let bn = certified_lower_bound(&samples, &cfg, near).unwrap();
        let bf = certified_lower_bound(&samples, &cfg, far).unwrap();
        if let Some(f) = bf {
            let n = bn.expect("a certified far radius implies the near one");
            prop_assert!(f.bound <= n.bound);
            prop_assert!(f.index <= n.index);
        }
        if let Some(b) = bn {
            if b.index <= n / 2 {
                prop_assert!(b.bound <= smoothed_trigger_accuracy(&samples));
            }
        }
    }
}
