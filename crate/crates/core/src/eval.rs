//! Linear probing of frozen representations, classification metrics,
//! paired comparisons between methods, and embedding export.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{window_label, LabeledDataset, WindowPair};
use crate::encoder::{encode_many, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{Dense, Parameters};
use crate::rng::{stream, Rng};
use crate::training::{adam_step, AdamConfig, AdamState};

/// A window of one sample together with its majority label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub sample: usize,
    pub start: usize,
    pub label: usize,
}

/// Non-overlapping windows (stride `w`) of the given samples with majority labels.
pub fn labeled_windows(dataset: &LabeledDataset, samples: &[usize]) -> Result<Vec<LabeledWindow>> {
    let w = dataset.window_width();
    let mut out = Vec::new();
    for &s in samples {
        let sample = dataset
            .samples()
            .get(s)
            .ok_or_else(|| Error::Shape(format!("no sample {s}")))?;
        let states = sample
            .series
            .states()
            .ok_or_else(|| Error::Empty(format!("sample {s} has no state labels")))?;
        let mut t = 0;
        while t + w <= states.len() {
            out.push(LabeledWindow {
                sample: s,
                start: t,
                label: window_label(states, t, w),
            });
            t += w;
        }
    }
    Ok(out)
}

/// Frozen-encoder representations of `windows`, one row each.
pub fn embed_windows(
    encoder: &EncoderParams,
    dataset: &LabeledDataset,
    windows: &[LabeledWindow],
) -> Result<Array2<f64>> {
    let w = dataset.window_width();
    let pairs: Vec<WindowPair<'_>> = windows
        .iter()
        .map(|lw| dataset.samples()[lw.sample].window(lw.start, w))
        .collect::<Result<_>>()?;
    encode_many(encoder, &pairs)
}

pub type ProbeParams = Dense;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            patience: 10,
            seed: 0,
        }
    }
}

fn check_labels(z: &Array2<f64>, labels: &[usize], n_classes: usize) -> Result<()> {
    if z.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} representations for {} labels",
            z.nrows(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Label { label, n_classes });
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub(crate) fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

fn probe_loss(probe: &ProbeParams, z: &Array2<f64>, labels: &[usize]) -> f64 {
    cross_entropy(&probe.forward(&z.view()), labels).0
}

/// Per-column mean and standard deviation (1 for constant columns).
fn column_stats(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let std = z
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

/// Softmax-regression probe trained by Adam on minibatches, keeping the
/// parameters with the lowest validation cross-entropy (training loss when
/// `val` is `None`). Inputs are standardized with training statistics and the
/// scaling is folded back, so the result is an affine map on raw inputs.
pub fn train_probe(
    train: (&Array2<f64>, &[usize]),
    val: Option<(&Array2<f64>, &[usize])>,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeParams> {
    let (z_raw, y) = train;
    if y.is_empty() {
        return Err(Error::Empty("no probe training data".into()));
    }
    check_labels(z_raw, y, n_classes)?;
    if let Some((vz, vy)) = val {
        check_labels(vz, vy, n_classes)?;
        if vz.ncols() != z_raw.ncols() {
            return Err(Error::Shape(
                "validation representations have a different width".into(),
            ));
        }
    }
    let (mean, std) = column_stats(z_raw);
    let standardize = |m: &Array2<f64>| (m - &mean) / &std;
    let z = standardize(z_raw);
    let val_z = val.map(|(vz, _)| standardize(vz));
    // convex problem: start from zero, the seed only orders minibatches
    let mut probe = Dense::zeros(z.ncols(), n_classes);
    let mut adam = AdamState::new(&probe);
    let adam_cfg = AdamConfig::new(cfg.learning_rate, 0.0);
    let monitor = |p: &ProbeParams| match (&val_z, val) {
        (Some(vz), Some((_, vy))) if !vy.is_empty() => probe_loss(p, vz, vy),
        _ => probe_loss(p, &z, y),
    };
    let mut best = probe.clone();
    let mut best_loss = monitor(&probe);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..y.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "probe/epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let zb = z.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (_, dlogits) = cross_entropy(&probe.forward(&zb.view()), &yb);
            let mut grad = probe.zeros_like();
            probe.backward_params(&zb.view(), &dlogits.view(), &mut grad);
            adam_step(&mut probe, &grad, &mut adam, &adam_cfg)?;
        }
        let loss = monitor(&probe);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at epoch {epoch}")));
        }
        if loss < best_loss {
            best_loss = loss;
            best = probe.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    // W (z − μ)/σ + b = (W/σ) z + (b − (W/σ) μ)
    let weight = &best.weight / &std;
    let bias = &best.bias - &weight.dot(&mean);
    Ok(Dense { weight, bias })
}

pub fn predict_proba(probe: &ProbeParams, z: &ArrayView2<f64>) -> Array2<f64> {
    softmax(&probe.forward(z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean of the per-class values that are defined.
    pub auprc: f64,
    /// One-vs-rest average precision; `None` for classes absent from the labels.
    pub per_class_auprc: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metrics from class scores (one row per example) and true labels.
pub fn evaluate_scores(scores: &Array2<f64>, labels: &[usize]) -> Result<EvalResult> {
    let s = scores.ncols();
    check_labels(scores, labels, s)?;
    if labels.is_empty() {
        return Err(Error::Empty("no examples to evaluate".into()));
    }
    let mut confusion = vec![vec![0usize; s]; s];
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let pred = argmax(&row.to_vec());
        confusion[y][pred] += 1;
    }
    let correct: usize = (0..s).map(|c| confusion[c][c]).sum();
    let per_class_auprc: Vec<Option<f64>> = (0..s)
        .map(|c| {
            let col = scores.column(c).to_vec();
            let hits: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            average_precision(&col, &hits)
        })
        .collect();
    let defined: Vec<f64> = per_class_auprc.iter().flatten().copied().collect();
    let auprc = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        auprc,
        per_class_auprc,
        confusion,
    })
}

pub fn evaluate(probe: &ProbeParams, z: &Array2<f64>, labels: &[usize]) -> Result<EvalResult> {
    if z.ncols() != probe.inputs() {
        return Err(Error::Shape(format!(
            "probe expects width {}, got {}",
            probe.inputs(),
            z.ncols()
        )));
    }
    evaluate_scores(&predict_proba(probe, &z.view()), labels)
}

/// Average precision of `scores` against binary relevance, stepping over
/// distinct score thresholds so that tied scores enter as one block.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels must align");
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let block_tp_before = tp;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += positive[order[j]] as usize;
            seen += 1;
            j += 1;
        }
        if tp > block_tp_before {
            ap += (tp - block_tp_before) as f64 / total_pos as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of positive differences `a − b`.
    pub statistic: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
    /// All differences were zero.
    pub degenerate: bool,
}

pub const WILCOXON_EXACT_MAX: usize = 25;

/// Mid-ranks of `values` (1-based).
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test. Exact null distribution (over all
/// sign assignments of the observed mid-ranks) for `n ≤ 25`, otherwise
/// the normal approximation with continuity and tie corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("no pairs".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            statistic: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    if n <= WILCOXON_EXACT_MAX {
        // mid-ranks are multiples of ½, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult {
            p_value: p,
            statistic: w_plus,
            n,
            exact: true,
            degenerate: false,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let dev = (w_plus - mean).abs();
    let z = ((dev - 0.5).max(0.0)) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult {
        p_value: p,
        statistic: w_plus,
        n,
        exact: false,
        degenerate: false,
    })
}

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap of an empty sample".into()));
    }
    if resamples == 0 || !(0.0..1.0).contains(&level) {
        return Err(Error::Config(
            "need resamples ≥ 1 and level in (0, 1)".into(),
        ));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((
        quantile_sorted(&means, alpha),
        quantile_sorted(&means, 1.0 - alpha),
    ))
}

/// CSV with header `z_0,…,z_{h−1},label`; shortest round-trip float formatting.
pub fn export_embeddings(z: &Array2<f64>, labels: &[usize], path: &Path) -> Result<()> {
    if z.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            z.nrows(),
            labels.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    let mut header: Vec<String> = (0..z.ncols()).map(|i| format!("z_{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(Error::csv(path))?;
    for (row, label) in z.rows().into_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

/// Inverse of [`export_embeddings`].
pub fn import_embeddings(path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let width = r.headers().map_err(Error::csv(path))?.len();
    if width == 0 {
        return Err(Error::Malformed {
            what: "embeddings",
            path: path.to_owned(),
            detail: "empty header".into(),
        });
    }
    let h = width - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(Error::csv(path))?;
        let bad = |detail: String| Error::Malformed {
            what: "embeddings",
            path: path.to_owned(),
            detail,
        };
        for field in rec.iter().take(h) {
            values.push(field.parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        labels.push(
            rec.get(h)
                .ok_or_else(|| bad("missing label".into()))?
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        );
    }
    let z = Array2::from_shape_vec((labels.len(), h), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((z, labels))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
