//! Contrastive training: the pair discriminator, the debiased neighborhood
//! loss, its exact gradients, Adam, gradient checking, and the epoch loop
//! with early stopping shared by every trainer in the crate.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, WindowPair};
use crate::encoder::{
    encode_batch, encode_batch_backward, init_encoder, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::neighborhood::{sample_pairs, HalfwidthCache, NeighborhoodConfig, NeighborhoodSpec};
use crate::nn::{relu_backward, relu_inplace, sigmoid, Dense, Parameters};
use crate::rng::{digest_json, stream, Rng};

/// Probabilities are clamped to `[LOG_CLAMP, 1 − LOG_CLAMP]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

/// `2h → 4h` rectifier layer followed by a `4h → 1` logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub hidden: Dense,
    pub output: Dense,
}

impl Parameters for DiscriminatorParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        self.hidden
            .push_tensors(&mut out, "disc.hidden.weight", "disc.hidden.bias");
        self.output
            .push_tensors(&mut out, "disc.output.weight", "disc.output.bias");
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        self.hidden
            .push_tensors_mut(&mut out, "disc.hidden.weight", "disc.hidden.bias");
        self.output
            .push_tensors_mut(&mut out, "disc.output.weight", "disc.output.bias");
        out
    }
}

impl DiscriminatorParams {
    pub fn init(repr_dim: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Dense::init(2 * repr_dim, 4 * repr_dim, rng),
            output: Dense::init(4 * repr_dim, 1, rng),
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.hidden.inputs() / 2
    }

    fn logits(&self, pairs: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        let mut hidden = self.hidden.forward(&pairs.view());
        relu_inplace(&mut hidden);
        let logits = self.output.forward(&hidden.view()).column(0).to_owned();
        (logits, hidden)
    }

    /// Backward from per-pair logit gradients; returns `∂L/∂pairs`.
    fn backward(
        &self,
        pairs: &Array2<f64>,
        hidden: &Array2<f64>,
        dlogits: &Array1<f64>,
        grad: &mut Self,
    ) -> Array2<f64> {
        let dl = dlogits.view().insert_axis(Axis(1));
        let mut dh = self.output.backward(&hidden.view(), &dl, &mut grad.output);
        relu_backward(hidden, &mut dh);
        self.hidden
            .backward(&pairs.view(), &dh.view(), &mut grad.hidden)
    }
}

fn clamp_prob(logit: f64) -> (f64, bool) {
    let p = sigmoid(logit);
    if p < LOG_CLAMP {
        (LOG_CLAMP, true)
    } else if p > 1.0 - LOG_CLAMP {
        (1.0 - LOG_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Probability that `z_a` and `z_b` come from neighbouring windows.
pub fn discriminate(
    z_a: &ArrayView1<f64>,
    z_b: &ArrayView1<f64>,
    params: &DiscriminatorParams,
) -> Result<f64> {
    let h = params.repr_dim();
    if z_a.len() != h || z_b.len() != h {
        return Err(Error::Shape(format!(
            "discriminator expects two vectors of length {h}"
        )));
    }
    let pair = concatenate![Axis(0), *z_a, *z_b].insert_axis(Axis(0));
    let (logits, _) = params.logits(&pair);
    Ok(clamp_prob(logits[0]).0)
}

/// Pair roles within one anchor's loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairKind {
    Positive,
    Negative,
}

/// `(ln p + ln 2, ln(1 − p) + ln 2, clamped)` for `p = σ(l)`, evaluated from
/// the logit so that values near `p = ½` keep full relative precision.
fn centered_log_probs(l: f64) -> (f64, f64, bool) {
    let (p, clamped) = clamp_prob(l);
    let ln2 = std::f64::consts::LN_2;
    if clamped {
        let (lo, hi) = (LOG_CLAMP.ln() + ln2, (-LOG_CLAMP).ln_1p() + ln2);
        return if p < 0.5 {
            (lo, hi, true)
        } else {
            (hi, lo, true)
        };
    }
    let curvature = (2.0 * (l / 4.0).sinh().powi(2)).ln_1p();
    (l / 2.0 - curvature, -l / 2.0 - curvature, false)
}

/// Loss above `2 ln 2` (its value at an uninformative discriminator) and
/// `∂L/∂logit` for each pair; `scale` weights the whole anchor.
fn pair_terms(
    logits: &[f64],
    kinds: &[PairKind],
    n_pos: usize,
    n_neg: usize,
    m: f64,
    scale: f64,
) -> (f64, Vec<f64>) {
    let mut excess = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for (&l, &kind) in logits.iter().zip(kinds) {
        let (log_p, log_q, clamped) = centered_log_probs(l);
        let p = sigmoid(l);
        let live = if clamped { 0.0 } else { 1.0 };
        match kind {
            PairKind::Positive => {
                let w = scale / n_pos as f64;
                excess -= w * log_p;
                dlogits.push(-w * (1.0 - p) * live);
            }
            PairKind::Negative => {
                let w = scale / n_neg as f64;
                excess -= w * ((1.0 - m) * log_q + m * log_p);
                dlogits.push(-w * ((1.0 - m) * -p + m * (1.0 - p)) * live);
            }
        }
    }
    (excess, dlogits)
}

const TWO_LN_2: f64 = 2.0 * std::f64::consts::LN_2;

/// Debiased neighborhood loss for one anchor, with expectations as sample means.
pub fn tnc_loss(
    anchor: &ArrayView1<f64>,
    positives: &[Array1<f64>],
    negatives: &[Array1<f64>],
    params: &DiscriminatorParams,
    m: f64,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty(
            "the loss needs at least one positive and one negative".into(),
        ));
    }
    let h = params.repr_dim();
    let others: Vec<_> = positives.iter().chain(negatives).collect();
    if anchor.len() != h || others.iter().any(|z| z.len() != h) {
        return Err(Error::Shape(format!(
            "representations must have length {h}"
        )));
    }
    let mut pairs = Array2::zeros((others.len(), 2 * h));
    for (i, z) in others.iter().enumerate() {
        pairs.slice_mut(s![i, ..h]).assign(anchor);
        pairs.slice_mut(s![i, h..]).assign(*z);
    }
    let (logits, _) = params.logits(&pairs);
    let kinds: Vec<_> = (0..others.len())
        .map(|i| {
            if i < positives.len() {
                PairKind::Positive
            } else {
                PairKind::Negative
            }
        })
        .collect();
    Ok(TWO_LN_2
        + pair_terms(
            logits.as_slice().unwrap(),
            &kinds,
            positives.len(),
            negatives.len(),
            m,
            1.0,
        )
        .0)
}

/// Encoder and discriminator trained together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TncModel {
    pub encoder: EncoderParams,
    pub discriminator: DiscriminatorParams,
}

impl Parameters for TncModel {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.encoder.tensors();
        out.extend(self.discriminator.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.discriminator.tensors_mut());
        out
    }
}

impl TncModel {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let encoder = init_encoder(config, rng)?;
        let discriminator = DiscriminatorParams::init(config.repr_dim, rng);
        Ok(Self {
            encoder,
            discriminator,
        })
    }
}

/// One anchor window of one sample with its sampled neighbours and non-neighbours.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorDraw {
    pub sample: usize,
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// A minibatch of anchor draws over a dataset.
#[derive(Clone, Debug)]
pub struct TncBatch<'a> {
    pub dataset: &'a LabeledDataset,
    pub draws: Vec<AnchorDraw>,
}

impl TncBatch<'_> {
    fn windows(&self) -> Result<Vec<WindowPair<'_>>> {
        let w = self.dataset.window_width();
        let mut out = Vec::new();
        for d in &self.draws {
            let sample = &self.dataset.samples()[d.sample];
            out.push(sample.window(d.anchor, w)?);
            for &t in d.positives.iter().chain(&d.negatives) {
                out.push(sample.window(t, w)?);
            }
        }
        Ok(out)
    }
}

/// Mean batch loss minus `2 ln 2` and, if `grad` is given, its exact gradient accumulated there.
fn batch_loss_impl(
    model: &TncModel,
    batch: &TncBatch<'_>,
    m: f64,
    grad: Option<&mut TncModel>,
) -> Result<f64> {
    if batch.draws.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    if batch
        .draws
        .iter()
        .any(|d| d.positives.is_empty() || d.negatives.is_empty())
    {
        return Err(Error::Empty(
            "every anchor needs a positive and a negative".into(),
        ));
    }
    let windows = batch.windows()?;
    let (z, trace) = encode_batch(&model.encoder, &windows)?;
    let h = z.ncols();
    let n_pairs: usize = batch
        .draws
        .iter()
        .map(|d| d.positives.len() + d.negatives.len())
        .sum();
    let mut pairs = Array2::zeros((n_pairs, 2 * h));
    let mut kinds = Vec::with_capacity(n_pairs);
    // (row of anchor z, row of other z) per pair
    let mut rows = Vec::with_capacity(n_pairs);
    let mut row = 0;
    let mut p = 0;
    for d in &batch.draws {
        let anchor_row = row;
        row += 1;
        for (k, _) in d.positives.iter().chain(&d.negatives).enumerate() {
            pairs.slice_mut(s![p, ..h]).assign(&z.row(anchor_row));
            pairs.slice_mut(s![p, h..]).assign(&z.row(row));
            kinds.push(if k < d.positives.len() {
                PairKind::Positive
            } else {
                PairKind::Negative
            });
            rows.push((anchor_row, row));
            row += 1;
            p += 1;
        }
    }
    let (logits, hidden) = model.discriminator.logits(&pairs);
    let scale = 1.0 / batch.draws.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(n_pairs);
    let mut offset = 0;
    for d in &batch.draws {
        let n = d.positives.len() + d.negatives.len();
        let (l, dl) = pair_terms(
            &logits.as_slice().unwrap()[offset..offset + n],
            &kinds[offset..offset + n],
            d.positives.len(),
            d.negatives.len(),
            m,
            scale,
        );
        loss += l;
        dlogits.extend(dl);
        offset += n;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    if let Some(grad) = grad {
        let dpairs = model.discriminator.backward(
            &pairs,
            &hidden,
            &Array1::from(dlogits),
            &mut grad.discriminator,
        );
        let mut dz = Array2::zeros(z.dim());
        for (pi, &(a, o)) in rows.iter().enumerate() {
            let mut ra = dz.row_mut(a);
            ra += &dpairs.slice(s![pi, ..h]);
            let mut ro = dz.row_mut(o);
            ro += &dpairs.slice(s![pi, h..]);
        }
        encode_batch_backward(&model.encoder, &trace, &dz, &mut grad.encoder);
    }
    Ok(loss)
}

pub fn batch_loss(model: &TncModel, batch: &TncBatch<'_>, m: f64) -> Result<f64> {
    Ok(TWO_LN_2 + batch_loss_impl(model, batch, m, None)?)
}

/// `batch_loss − 2 ln 2`. Same gradient; differences of nearby parameter
/// settings lose no precision to the constant.
pub fn batch_excess_loss(model: &TncModel, batch: &TncBatch<'_>, m: f64) -> Result<f64> {
    batch_loss_impl(model, batch, m, None)
}

/// Mean batch loss and its exact gradient with respect to every encoder and
/// discriminator parameter.
pub fn compute_gradients(
    model: &TncModel,
    batch: &TncBatch<'_>,
    m: f64,
) -> Result<(f64, TncModel)> {
    let mut grad = model.zeros_like();
    let excess = batch_loss_impl(model, batch, m, Some(&mut grad))?;
    Ok((TWO_LN_2 + excess, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

/// Compare `analytic` against central differences of `loss` on up to
/// `coords_per_group` random coordinates of every tensor (all of them when
/// the tensor is smaller). Relative error uses `max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<P: Parameters>(
    mut loss: impl FnMut(&P) -> f64,
    params: &P,
    analytic: &P,
    step: f64,
    coords_per_group: usize,
    rng: &mut Rng,
) -> GradCheckReport {
    let analytic_tensors: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.to_vec())
        .collect();
    let names: Vec<&'static str> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (g, name) in names.iter().enumerate() {
        let len = analytic_tensors[g].len();
        let coords: Vec<usize> = if len <= coords_per_group {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, coords_per_group).into_vec()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let original = probe.tensors()[g].1[c];
            probe.tensors_mut()[g].1[c] = original + step;
            let up = loss(&probe);
            probe.tensors_mut()[g].1[c] = original - step;
            let down = loss(&probe);
            probe.tensors_mut()[g].1[c] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic_tensors[g][c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        groups.push(GroupError {
            group: (*name).to_owned(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        max_rel_error,
        groups,
    }
}

/// Central-difference check of the full loss at a random initialization.
/// Draws `n_anchors` anchors with five uniformly placed positives and five
/// negatives each; batch positions and checked coordinates derive from `seed`.
pub fn gradcheck_tnc(
    dataset: &LabeledDataset,
    config: &EncoderConfig,
    seed: u64,
    n_anchors: usize,
    m: f64,
) -> Result<GradCheckReport> {
    if dataset.is_empty() || dataset.series_len() < dataset.window_width() {
        return Err(Error::Empty(
            "gradient check needs at least one full window".into(),
        ));
    }
    let model = TncModel::init(config, &mut stream(seed, "init", 0))?;
    let mut rng = crate::rng::seeded(seed);
    let last = dataset.series_len() - dataset.window_width();
    let draws = (0..n_anchors)
        .map(|_| AnchorDraw {
            sample: rng.random_range(0..dataset.len()),
            anchor: rng.random_range(0..=last),
            positives: (0..5).map(|_| rng.random_range(0..=last)).collect(),
            negatives: (0..5).map(|_| rng.random_range(0..=last)).collect(),
        })
        .collect();
    let batch = TncBatch { dataset, draws };
    let (_, grad) = compute_gradients(&model, &batch, m)?;
    let mut failure = None;
    let report = finite_diff_check(
        |p: &TncModel| {
            batch_excess_loss(p, &batch, m).unwrap_or_else(|e| {
                failure.get_or_insert(e.to_string());
                f64::NAN
            })
        },
        &model,
        &grad,
        1e-5,
        200,
        &mut crate::rng::seeded(seed.wrapping_add(100)),
    );
    match failure {
        Some(e) => Err(Error::NonFinite(e)),
        None => Ok(report),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam with L2 decay folded into the gradient.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.first.len() {
        return Err(Error::Shape(
            "parameters, gradients and Adam state disagree".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (g, ((_, theta), (_, grad))) in tensors.iter_mut().zip(&grads).enumerate() {
        if theta.len() != grad.len() || state.first[g].len() != grad.len() {
            return Err(Error::Shape(format!("tensor {g} length mismatch")));
        }
        let (m, v) = (&mut state.first[g], &mut state.second[g]);
        for i in 0..theta.len() {
            let gi = grad[i] + cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Probability that a non-neighbouring window is actually positive.
    pub m: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Anchors drawn per training sample per epoch.
    pub anchors_per_sample: usize,
    /// Anchors per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    #[serde(default)]
    pub neighborhood: NeighborhoodConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 100,
            patience: 10,
            m: 0.05,
            n_pos: 5,
            n_neg: 5,
            anchors_per_sample: 8,
            batch_size: 4,
            seed: 0,
            validation_fraction: 0.2,
            neighborhood: NeighborhoodConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!("m = {} outside [0, 1)", self.m)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if self.batch_size == 0
            || self.anchors_per_sample == 0
            || self.n_pos == 0
            || self.n_neg == 0
        {
            return Err(Error::Config(
                "batch size, anchors and pair counts must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    pub param_count: usize,
    pub train_samples: Vec<usize>,
    pub val_samples: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (minimum validation loss).
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Set when patience ran out before the epoch budget.
    pub early_stopped_at: Option<usize>,
}

/// Deterministic train/validation partition of `n` samples.
pub fn split_samples(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "train/split", 0));
    let mut n_val = (validation_fraction * n as f64).round() as usize;
    if validation_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// A training problem the shared epoch loop can drive.
pub trait Objective {
    type Model: Parameters;
    type Batch;

    /// Minibatches for `epoch`, drawn from a stream that depends only on the epoch.
    fn epoch_batches(&mut self, epoch: usize) -> Result<Vec<Self::Batch>>;
    fn loss_and_grad(&self, model: &Self::Model, batch: &Self::Batch)
        -> Result<(f64, Self::Model)>;
    fn validation_loss(&self, model: &Self::Model) -> Result<Option<f64>>;

    /// Hook run after every optimizer step (the BYOL teacher update lives here).
    fn after_step(&mut self, _model: &Self::Model) {}

    fn extra_state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn restore_extra_state(&mut self, _state: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

/// Everything needed to resume the epoch loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub epochs_done: usize,
    pub model: M,
    pub best_model: M,
    pub adam: AdamState,
    pub epochs_since_improvement: usize,
    pub report: TrainReport,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<M: Serialize>(
    checkpoint: &Checkpoint<M>,
    path: &std::path::Path,
) -> Result<()> {
    crate::data::write_json(path, checkpoint)
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &std::path::Path) -> Result<Checkpoint<M>> {
    crate::data::read_json(path)
}

/// Adam over `cfg.epochs` epochs with early stopping on the validation loss
/// (or the training loss when there is no validation data). Returns the
/// final checkpoint, whose `best_model` is the model to use.
pub fn run_training<O: Objective>(
    objective: &mut O,
    start: Checkpoint<O::Model>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint<O::Model>) -> Result<()>,
) -> Result<Checkpoint<O::Model>> {
    let adam = cfg.adam();
    let mut ck = start;
    if ck.epochs_done > 0 {
        objective.restore_extra_state(&ck.extra)?;
    }
    while ck.epochs_done < cfg.epochs && ck.report.early_stopped_at.is_none() {
        let epoch = ck.epochs_done;
        let batches = objective.epoch_batches(epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grad) = objective.loss_and_grad(&ck.model, batch)?;
            adam_step(&mut ck.model, &grad, &mut ck.adam, &adam)?;
            objective.after_step(&ck.model);
            total += loss;
        }
        let train_loss = if batches.is_empty() {
            0.0
        } else {
            total / batches.len() as f64
        };
        let val_loss = objective.validation_loss(&ck.model)?.unwrap_or(train_loss);
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} loss")));
        }
        ck.report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if ck.report.best_val_loss.is_none_or(|b| val_loss < b) {
            ck.report.best_val_loss = Some(val_loss);
            ck.report.best_epoch = Some(epoch);
            ck.best_model = ck.model.clone();
            ck.epochs_since_improvement = 0;
        } else {
            ck.epochs_since_improvement += 1;
        }
        ck.epochs_done += 1;
        if ck.epochs_since_improvement >= cfg.patience && ck.epochs_done < cfg.epochs {
            ck.report.early_stopped_at = Some(epoch);
        }
        ck.extra = objective.extra_state();
        on_epoch(&ck)?;
    }
    Ok(ck)
}

/// A fresh checkpoint for `model` before the first epoch.
pub fn initial_checkpoint<M: Parameters>(model: M, report: TrainReport) -> Checkpoint<M> {
    Checkpoint {
        epochs_done: 0,
        adam: AdamState::new(&model),
        best_model: model.clone(),
        model,
        epochs_since_improvement: 0,
        report,
        extra: serde_json::Value::Null,
    }
}

const ANCHOR_ATTEMPTS: usize = 64;

/// Draw an anchor in `sample` with its positives and negatives.
pub(crate) fn draw_anchor(
    dataset: &LabeledDataset,
    sample: usize,
    n_pos: usize,
    n_neg: usize,
    cfg: &NeighborhoodConfig,
    cache: &mut HalfwidthCache,
    rng: &mut Rng,
) -> Result<AnchorDraw> {
    let w = dataset.window_width();
    let series = &dataset.samples()[sample].series;
    let len = series.len();
    if len < w {
        return Err(Error::WindowOutOfRange {
            start: 0,
            width: w,
            len,
        });
    }
    // anchors whose neighborhood covers the whole series have no negatives; redraw those
    let mut last_err = None;
    for _ in 0..ANCHOR_ATTEMPTS {
        let anchor = rng.random_range(0..=len - w);
        let delta = cache.get_or_compute(sample, series, anchor, w, cfg)?;
        let spec = NeighborhoodSpec {
            center: anchor,
            delta,
            series_length: len,
            window_width: w,
        };
        match sample_pairs(&spec, n_pos, n_neg, rng) {
            Ok((positives, negatives)) => {
                return Ok(AnchorDraw {
                    sample,
                    anchor,
                    positives,
                    negatives,
                })
            }
            Err(e @ Error::EmptyNegativeRegion { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Draws for every sample in `samples`, `per_sample` anchors each, in shuffled order.
pub(crate) fn draw_epoch(
    dataset: &LabeledDataset,
    samples: &[usize],
    per_sample: usize,
    n_pos: usize,
    n_neg: usize,
    cfg: &NeighborhoodConfig,
    cache: &mut HalfwidthCache,
    rng: &mut Rng,
) -> Result<Vec<AnchorDraw>> {
    let mut draws = Vec::with_capacity(samples.len() * per_sample);
    for &s in samples {
        for _ in 0..per_sample {
            draws.push(draw_anchor(dataset, s, n_pos, n_neg, cfg, cache, rng)?);
        }
    }
    draws.shuffle(rng);
    Ok(draws)
}

struct TncObjective<'a> {
    dataset: &'a LabeledDataset,
    train: Vec<usize>,
    cfg: &'a TrainConfig,
    cache: HalfwidthCache,
    validation: Vec<AnchorDraw>,
}

impl<'a> TncObjective<'a> {
    fn new(
        dataset: &'a LabeledDataset,
        train: Vec<usize>,
        val: &[usize],
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        let mut cache = HalfwidthCache::new();
        let mut rng = stream(cfg.seed, "train/validation", 0);
        let validation = draw_epoch(
            dataset,
            val,
            cfg.anchors_per_sample,
            cfg.n_pos,
            cfg.n_neg,
            &cfg.neighborhood,
            &mut cache,
            &mut rng,
        )?;
        Ok(Self {
            dataset,
            train,
            cfg,
            cache,
            validation,
        })
    }
}

impl<'a> Objective for TncObjective<'a> {
    type Model = TncModel;
    type Batch = Vec<AnchorDraw>;

    fn epoch_batches(&mut self, epoch: usize) -> Result<Vec<Self::Batch>> {
        let mut rng = stream(self.cfg.seed, "train/epoch", epoch as u64);
        let c = self.cfg;
        let draws = draw_epoch(
            self.dataset,
            &self.train,
            c.anchors_per_sample,
            c.n_pos,
            c.n_neg,
            &c.neighborhood,
            &mut self.cache,
            &mut rng,
        )?;
        Ok(draws
            .chunks(c.batch_size)
            .map(<[AnchorDraw]>::to_vec)
            .collect())
    }

    fn loss_and_grad(&self, model: &TncModel, batch: &Vec<AnchorDraw>) -> Result<(f64, TncModel)> {
        compute_gradients(
            model,
            &TncBatch {
                dataset: self.dataset,
                draws: batch.clone(),
            },
            self.cfg.m,
        )
    }

    fn validation_loss(&self, model: &TncModel) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.validation.chunks(32) {
            let batch = TncBatch {
                dataset: self.dataset,
                draws: chunk.to_vec(),
            };
            total += batch_loss(model, &batch, self.cfg.m)? * chunk.len() as f64;
        }
        Ok(Some(total / self.validation.len() as f64))
    }
}

pub(crate) fn new_report(
    method: &str,
    cfg: &TrainConfig,
    econfig: &EncoderConfig,
    param_count: usize,
    train: &[usize],
    val: &[usize],
) -> TrainReport {
    TrainReport {
        method: method.to_owned(),
        seed: cfg.seed,
        config_digest: digest_json(&(method, cfg, econfig)),
        param_count,
        train_samples: train.to_vec(),
        val_samples: val.to_vec(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        early_stopped_at: None,
    }
}

/// Contrastive training on explicit train/validation sample indices.
/// `on_epoch` sees every checkpoint; pass `resume` to continue a saved run.
pub fn train_tnc_with(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    train: &[usize],
    val: &[usize],
    resume: Option<Checkpoint<TncModel>>,
    on_epoch: impl FnMut(&Checkpoint<TncModel>) -> Result<()>,
) -> Result<Checkpoint<TncModel>> {
    tconfig.validate()?;
    econfig.validate()?;
    if dataset.is_empty() || train.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    if dataset.n_features() != econfig.n_nodes {
        return Err(Error::Shape(format!(
            "dataset has {} features, encoder expects {}",
            dataset.n_features(),
            econfig.n_nodes
        )));
    }
    let method = if econfig.use_graph { "graphtnc" } else { "tnc" };
    let start = match resume {
        Some(ck) => ck,
        None => {
            let model = TncModel::init(econfig, &mut stream(tconfig.seed, "init", 0))?;
            let report = new_report(
                method,
                tconfig,
                econfig,
                model.encoder.param_count(),
                train,
                val,
            );
            initial_checkpoint(model, report)
        }
    };
    let mut objective = TncObjective::new(dataset, train.to_vec(), val, tconfig)?;
    run_training(&mut objective, start, tconfig, on_epoch)
}

/// Train the graph-aware encoder with the contrastive neighborhood loss.
/// Only the encoder is needed downstream; the discriminator is returned for audit.
pub fn train_graphtnc(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
) -> Result<(EncoderParams, DiscriminatorParams, TrainReport)> {
    let (train, val) = split_samples(dataset.len(), tconfig.validation_fraction, tconfig.seed);
    let ck = train_tnc_with(dataset, econfig, tconfig, &train, &val, None, |_| Ok(()))?;
    Ok((
        ck.best_model.encoder,
        ck.best_model.discriminator,
        ck.report,
    ))
}
