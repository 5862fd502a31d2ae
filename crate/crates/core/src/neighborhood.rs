//! Temporal neighborhoods: how far around an anchor window the signal stays
//! stationary, and sampling of positive (inside) and negative (outside)
//! window starts.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adf::{adf_test, default_max_lag};
use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    /// ADF significance level for calling a feature stationary.
    pub significance: f64,
    /// Fraction of features that must be stationary for the span to count.
    pub stationary_fraction: f64,
    /// Cap on the halfwidth, in multiples of the window width.
    pub max_delta_windows: usize,
    /// Fixed ADF lag cap; `None` uses `⌊(n−1)^{1/3}⌋` of each span.
    pub max_lag: Option<usize>,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            significance: 0.05,
            stationary_fraction: 0.5,
            max_delta_windows: 4,
            max_lag: None,
        }
    }
}

/// Anchor `t` with its neighborhood halfwidth `δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub center: usize,
    pub delta: usize,
    pub series_length: usize,
    pub window_width: usize,
}

/// Whether a majority of non-constant features reject a unit root on `lo..hi`.
fn span_is_stationary(
    series: &MultivariateSeries,
    lo: usize,
    hi: usize,
    cfg: &NeighborhoodConfig,
) -> Result<bool> {
    let values = series.values();
    let mut tested = 0usize;
    let mut stationary = 0usize;
    for row in values.rows() {
        let span: Vec<f64> = row.iter().skip(lo).take(hi - lo).copied().collect();
        if span.iter().all(|&v| v == span[0]) {
            continue;
        }
        let max_lag = cfg.max_lag.unwrap_or_else(|| default_max_lag(span.len()));
        tested += 1;
        match adf_test(&span, max_lag) {
            Ok(r) if r.p_value < cfg.significance => stationary += 1,
            Ok(_) => {}
            // Too short or rank-deficient spans count as non-stationary evidence.
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if tested == 0 {
        return Err(Error::Degenerate(
            "every feature is constant over the span".into(),
        ));
    }
    Ok(stationary as f64 >= cfg.stationary_fraction * tested as f64)
}

/// Grow `δ` from `w` in steps of `w` while `[t−δ, t+δ+w)` stays stationary.
pub fn neighborhood_halfwidth(
    series: &MultivariateSeries,
    t: usize,
    w: usize,
    max_delta: usize,
    cfg: &NeighborhoodConfig,
) -> Result<usize> {
    let len = series.len();
    if w == 0 {
        return Err(Error::ZeroWidth);
    }
    if t + w > len {
        return Err(Error::WindowOutOfRange {
            start: t,
            width: w,
            len,
        });
    }
    let mut delta = w;
    loop {
        let candidate = delta + w;
        if candidate > max_delta {
            break;
        }
        let lo = t.saturating_sub(candidate);
        let hi = (t + candidate + w).min(len);
        if !span_is_stationary(series, lo, hi, cfg)? {
            break;
        }
        delta = candidate;
    }
    Ok(delta)
}

/// Positive starts uniform over `[t−δ, t+δ] ∩ [0, T−w]`, negatives uniform over the rest of `[0, T−w]`.
pub fn sample_pairs(
    spec: &NeighborhoodSpec,
    n_pos: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let NeighborhoodSpec {
        center,
        delta,
        series_length,
        window_width,
    } = *spec;
    if window_width == 0 {
        return Err(Error::ZeroWidth);
    }
    if center + window_width > series_length {
        return Err(Error::WindowOutOfRange {
            start: center,
            width: window_width,
            len: series_length,
        });
    }
    let last = series_length - window_width;
    let pos_lo = center.saturating_sub(delta);
    let pos_hi = (center + delta).min(last);
    let below = pos_lo;
    let above = last - pos_hi;
    if below + above == 0 {
        return Err(Error::EmptyNegativeRegion { center, delta });
    }
    let positives = (0..n_pos)
        .map(|_| rng.random_range(pos_lo..=pos_hi))
        .collect();
    let negatives = (0..n_neg)
        .map(|_| {
            let k = rng.random_range(0..below + above);
            if k < below {
                k
            } else {
                pos_hi + 1 + (k - below)
            }
        })
        .collect();
    Ok((positives, negatives))
}

/// Positive starts only; the rest of the series may be empty.
pub fn sample_positives(
    spec: &NeighborhoodSpec,
    n_pos: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let NeighborhoodSpec {
        center,
        delta,
        series_length,
        window_width,
    } = *spec;
    if window_width == 0 {
        return Err(Error::ZeroWidth);
    }
    if center + window_width > series_length {
        return Err(Error::WindowOutOfRange {
            start: center,
            width: window_width,
            len: series_length,
        });
    }
    let lo = center.saturating_sub(delta);
    let hi = (center + delta).min(series_length - window_width);
    Ok((0..n_pos).map(|_| rng.random_range(lo..=hi)).collect())
}

/// Memoized halfwidths keyed by (sample index, anchor).
#[derive(Debug, Default)]
pub struct HalfwidthCache {
    entries: HashMap<(usize, usize), usize>,
}

impl HalfwidthCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &mut self,
        sample: usize,
        series: &MultivariateSeries,
        t: usize,
        w: usize,
        cfg: &NeighborhoodConfig,
    ) -> Result<usize> {
        if let Some(&d) = self.entries.get(&(sample, t)) {
            return Ok(d);
        }
        let d = neighborhood_halfwidth(series, t, w, cfg.max_delta_windows * w, cfg)?;
        self.entries.insert((sample, t), d);
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
