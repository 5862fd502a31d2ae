//! ADF against frozen statsmodels values (see fixtures/gen_adf_reference.py)
//! and Monte-Carlo rejection rates.

use graphtnc::adf::{adf_test, adf_test_fixed_lag, default_max_lag};
use graphtnc::rng::seeded;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    series: Vec<f64>,
    lag: usize,
    statistic: f64,
    p_value: f64,
    max_lag: usize,
    auto_statistic: f64,
    auto_p_value: f64,
    auto_lag: usize,
}

fn cases() -> Vec<Case> {
    let text = include_str!("fixtures/adf_reference.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn fixed_lag_statistic_matches_reference() {
    let cases = cases();
    assert_eq!(cases.len(), 50);
    for (i, c) in cases.iter().enumerate() {
        let r = adf_test_fixed_lag(&c.series, c.lag).unwrap();
        assert!(
            (r.statistic - c.statistic).abs() < 1e-6,
            "case {i}: {} vs {}",
            r.statistic,
            c.statistic
        );
        assert!(
            (r.p_value - c.p_value).abs() < 1e-6,
            "case {i}: p {} vs {}",
            r.p_value,
            c.p_value
        );
    }
}

#[test]
fn aic_lag_selection_matches_reference() {
    for (i, c) in cases().iter().enumerate() {
        assert_eq!(default_max_lag(c.series.len()), c.max_lag);
        let r = adf_test(&c.series, c.max_lag).unwrap();
        assert_eq!(r.used_lag, c.auto_lag, "case {i}");
        assert!((r.statistic - c.auto_statistic).abs() < 1e-6, "case {i}");
        assert!((r.p_value - c.auto_p_value).abs() < 1e-6, "case {i}");
    }
}

fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect()
}

#[test]
fn white_noise_is_stationary() {
    let rejections = (0..100)
        .filter(|&s| {
            let x = white_noise(200, 1000 + s);
            adf_test(&x, default_max_lag(200)).unwrap().p_value < 0.05
        })
        .count();
    assert!(rejections >= 90, "{rejections}/100");
}

#[test]
fn random_walk_has_a_unit_root() {
    let kept = (0..100)
        .filter(|&s| {
            let mut acc = 0.0;
            let x: Vec<f64> = white_noise(200, 5000 + s)
                .into_iter()
                .map(|e| {
                    acc += e;
                    acc
                })
                .collect();
            adf_test(&x, default_max_lag(200)).unwrap().p_value > 0.05
        })
        .count();
    assert!(kept >= 80, "{kept}/100");
}
