//! Augmented Dickey–Fuller unit-root test (constant, no trend).
//!
//! The regression is `Δy_t = α + γ·y_{t−1} + Σ_{i=1..p} β_i Δy_{t−i} + ε_t` and
//! the statistic is the t-ratio of `γ`. With automatic selection, every lag
//! order `0..=max_lag` is fitted on the common sample left by `max_lag`, the
//! order with the lowest AIC is kept, and the regression is refitted on the
//! longest sample that order allows. P-values use MacKinnon's response surface.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdfResult {
    pub statistic: f64,
    pub p_value: f64,
    pub used_lag: usize,
    pub nobs: usize,
}

/// `⌊(n − 1)^{1/3}⌋`.
pub fn default_max_lag(n: usize) -> usize {
    let mut lag = ((n.saturating_sub(1)) as f64).cbrt().floor() as usize;
    // Guard against cbrt rounding just below an exact cube.
    while (lag + 1).pow(3) <= n.saturating_sub(1) {
        lag += 1;
    }
    lag
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// MacKinnon (1994) approximate p-value for the constant-only ADF statistic.
pub fn mackinnon_p_value(stat: f64) -> f64 {
    const TAU_MAX: f64 = 2.74;
    const TAU_MIN: f64 = -18.83;
    const TAU_STAR: f64 = -1.61;
    const SMALL_P: [f64; 3] = [2.1659, 1.4412, 0.038269];
    const LARGE_P: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];
    if stat > TAU_MAX {
        return 1.0;
    }
    if stat < TAU_MIN {
        return 0.0;
    }
    let coef: &[f64] = if stat <= TAU_STAR { &SMALL_P } else { &LARGE_P };
    let poly = coef.iter().rev().fold(0.0, |acc, c| acc * stat + c);
    standard_normal_cdf(poly)
}

struct OlsFit {
    t_level: f64,
    ssr: f64,
}

/// Regress on `[level, lag_1..lag_lags, const]` using the last `nobs` differences.
fn fit(series: &[f64], diff: &[f64], lags: usize, nobs: usize) -> Result<OlsFit> {
    let k = lags + 2;
    if nobs <= k {
        return Err(Error::Degenerate(format!(
            "{nobs} observations cannot fit {k} regressors"
        )));
    }
    let first = diff.len() - nobs;
    let x = DMatrix::from_fn(nobs, k, |row, col| {
        let j = first + row;
        match col {
            0 => series[j],
            c if c <= lags => diff[j - c],
            _ => 1.0,
        }
    });
    let y = DVector::from_iterator(nobs, diff[first..].iter().copied());
    let qr = x.clone().qr();
    let r = qr.r();
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-12 * r[(0, 0)].abs().max(1.0)) {
        return Err(Error::Degenerate(
            "ADF design matrix is rank deficient".into(),
        ));
    }
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Degenerate("singular ADF regression".into()))?;
    let resid = y - x * &beta;
    let ssr = resid.norm_squared();
    // (XᵀX)⁻¹₀₀ = ‖R⁻ᵀ e₀‖²
    let mut e0 = DVector::zeros(k);
    e0[0] = 1.0;
    let v = r
        .transpose()
        .solve_lower_triangular(&e0)
        .ok_or_else(|| Error::Degenerate("singular ADF regression".into()))?;
    let sigma2 = ssr / (nobs - k) as f64;
    Ok(OlsFit {
        t_level: beta[0] / (sigma2 * v.norm_squared()).sqrt(),
        ssr,
    })
}

fn validate(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag + 3 {
        return Err(Error::Degenerate(format!(
            "series of length {} is too short for lag {max_lag}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ADF input".into()));
    }
    if series.iter().all(|&v| v == series[0]) {
        return Err(Error::Degenerate("constant series".into()));
    }
    Ok(series.windows(2).map(|w| w[1] - w[0]).collect())
}

/// ADF test with a fixed number of lagged differences.
pub fn adf_test_fixed_lag(series: &[f64], lag: usize) -> Result<AdfResult> {
    let diff = validate(series, lag)?;
    let nobs = diff.len() - lag;
    let f = fit(series, &diff, lag, nobs)?;
    if !f.t_level.is_finite() {
        return Err(Error::Degenerate("ADF statistic is not finite".into()));
    }
    Ok(AdfResult {
        statistic: f.t_level,
        p_value: mackinnon_p_value(f.t_level),
        used_lag: lag,
        nobs,
    })
}

/// ADF test with the lag order chosen by AIC over `0..=max_lag`.
pub fn adf_test(series: &[f64], max_lag: usize) -> Result<AdfResult> {
    let diff = validate(series, max_lag)?;
    let common = diff.len() - max_lag;
    let mut best: Option<(f64, usize)> = None;
    for lag in 0..=max_lag {
        let f = match fit(series, &diff, lag, common) {
            Ok(f) => f,
            Err(_) if lag > 0 => continue,
            Err(e) => return Err(e),
        };
        let n = common as f64;
        let llf = -n / 2.0 * ((2.0 * std::f64::consts::PI).ln() + (f.ssr / n).ln() + 1.0);
        let aic = -2.0 * llf + 2.0 * (lag + 2) as f64;
        if best.is_none_or(|(b, _)| aic < b) {
            best = Some((aic, lag));
        }
    }
    let (_, lag) = best.expect("lag 0 always fits or errors");
    adf_test_fixed_lag(series, lag)
}
