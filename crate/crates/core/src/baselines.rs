//! Reference methods: the signal-only TNC encoder, BYOL and SimSiam on
//! temporal positive pairs, and end-to-end supervised training.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, WindowPair};
use crate::encoder::{
    encode_batch, encode_batch_backward, init_encoder, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::eval::{cross_entropy, labeled_windows, LabeledWindow};
use crate::neighborhood::{sample_positives, HalfwidthCache, NeighborhoodConfig, NeighborhoodSpec};
use crate::nn::{Dense, Mlp2, Parameters};
use crate::rng::{stream, Rng};
use crate::training::{
    adam_step, initial_checkpoint, new_report, run_training, split_samples, train_tnc_with,
    AdamState, Objective, TrainConfig, TrainReport,
};

/// Width of the projector and predictor layers.
pub const HEAD_WIDTH: usize = 128;

/// Guard for cosine similarities of (near) zero vectors.
pub const NORM_FLOOR: f64 = 1e-12;

/// The contrastive loss on the signal-only encoder (graphs ignored).
pub fn train_tnc_nograph(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    let (train, val) = split_samples(dataset.len(), tconfig.validation_fraction, tconfig.seed);
    let ck = train_tnc_with(
        dataset,
        &econfig.signal_only(),
        tconfig,
        &train,
        &val,
        None,
        |_| Ok(()),
    )?;
    Ok((ck.best_model.encoder, ck.report))
}

/// Row-wise cosine similarity with norms floored at [`NORM_FLOOR`].
pub fn cosine_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.rows().into_iter().zip(b.rows()).map(|(x, y)| {
        let nx = x.dot(&x).sqrt().max(NORM_FLOOR);
        let ny = y.dot(&y).sqrt().max(NORM_FLOOR);
        x.dot(&y) / (nx * ny)
    }))
}

/// `∂ cos(a_i, b_i) / ∂a_i`, scaled per row by `scale[i]`.
fn cosine_grad_a(a: &Array2<f64>, b: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (x, y) = (a.row(i), b.row(i));
        let raw = x.dot(&x).sqrt();
        let nx = raw.max(NORM_FLOOR);
        let ny = y.dot(&y).sqrt().max(NORM_FLOOR);
        let cos = x.dot(&y) / (nx * ny);
        row.assign(&(&y / (nx * ny)));
        if raw > NORM_FLOOR {
            row.scaled_add(-cos / (nx * nx), &x);
        }
        row *= scale[i];
    }
    out
}

/// Anchor and one neighbouring window of the same sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositivePair {
    pub sample: usize,
    pub anchor: usize,
    pub positive: usize,
}

pub(crate) fn draw_positive_pairs(
    dataset: &LabeledDataset,
    samples: &[usize],
    per_sample: usize,
    cfg: &NeighborhoodConfig,
    cache: &mut HalfwidthCache,
    rng: &mut Rng,
) -> Result<Vec<PositivePair>> {
    let w = dataset.window_width();
    let mut out = Vec::with_capacity(samples.len() * per_sample);
    for &s in samples {
        let series = &dataset.samples()[s].series;
        let len = series.len();
        for _ in 0..per_sample {
            let anchor = rng.random_range(0..=len - w);
            let delta = cache.get_or_compute(s, series, anchor, w, cfg)?;
            let spec = NeighborhoodSpec {
                center: anchor,
                delta,
                series_length: len,
                window_width: w,
            };
            let positive = sample_positives(&spec, 1, rng)?[0];
            out.push(PositivePair {
                sample: s,
                anchor,
                positive,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Anchors first, then positives, so rows `i` and `B + i` form pair `i`.
fn pair_windows<'a>(
    dataset: &'a LabeledDataset,
    pairs: &[PositivePair],
) -> Result<Vec<WindowPair<'a>>> {
    let w = dataset.window_width();
    let views = pairs
        .iter()
        .map(|p| (p.sample, p.anchor))
        .chain(pairs.iter().map(|p| (p.sample, p.positive)));
    views
        .map(|(s, t)| dataset.samples()[s].window(t, w))
        .collect()
}

fn halves(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let b = x.nrows() / 2;
    (
        x.slice(ndarray::s![..b, ..]).to_owned(),
        x.slice(ndarray::s![b.., ..]).to_owned(),
    )
}

fn stack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate![Axis(0), *a, *b]
}

/// Encoder, projector and predictor on the trainable branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineNetwork {
    pub encoder: EncoderParams,
    pub projector: Mlp2,
    pub predictor: Mlp2,
}

impl Parameters for OnlineNetwork {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.encoder.tensors();
        self.projector.push_tensors(
            &mut out,
            [
                "proj.first.weight",
                "proj.first.bias",
                "proj.second.weight",
                "proj.second.bias",
            ],
        );
        self.predictor.push_tensors(
            &mut out,
            [
                "pred.first.weight",
                "pred.first.bias",
                "pred.second.weight",
                "pred.second.bias",
            ],
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        self.projector.push_tensors_mut(
            &mut out,
            [
                "proj.first.weight",
                "proj.first.bias",
                "proj.second.weight",
                "proj.second.bias",
            ],
        );
        self.predictor.push_tensors_mut(
            &mut out,
            [
                "pred.first.weight",
                "pred.first.bias",
                "pred.second.weight",
                "pred.second.bias",
            ],
        );
        out
    }
}

impl OnlineNetwork {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            encoder: init_encoder(config, rng)?,
            projector: Mlp2::init(config.repr_dim, HEAD_WIDTH, HEAD_WIDTH, rng),
            predictor: Mlp2::init(HEAD_WIDTH, HEAD_WIDTH, HEAD_WIDTH, rng),
        })
    }
}

/// EMA copy of the online encoder and projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNetwork {
    pub encoder: EncoderParams,
    pub projector: Mlp2,
}

impl Parameters for TargetNetwork {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.encoder.tensors();
        self.projector.push_tensors(
            &mut out,
            [
                "proj.first.weight",
                "proj.first.bias",
                "proj.second.weight",
                "proj.second.bias",
            ],
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        self.projector.push_tensors_mut(
            &mut out,
            [
                "proj.first.weight",
                "proj.first.bias",
                "proj.second.weight",
                "proj.second.bias",
            ],
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByolParams {
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    /// EMA rate τ.
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 0.99;

impl ByolParams {
    /// The target starts as a copy of the online encoder and projector.
    pub fn init(config: &EncoderConfig, tau: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("τ = {tau} outside [0, 1]")));
        }
        let online = OnlineNetwork::init(config, rng)?;
        let target = TargetNetwork {
            encoder: online.encoder.clone(),
            projector: online.projector.clone(),
        };
        Ok(Self {
            online,
            target,
            tau,
        })
    }

    /// `θ_m ← τ·θ_m + (1 − τ)·θ`.
    pub fn ema_update(&mut self) {
        ema(&mut self.target, &self.online, self.tau);
    }
}

fn ema(target: &mut TargetNetwork, online: &OnlineNetwork, tau: f64) {
    for ((_, t), (_, o)) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (a, b) in t.iter_mut().zip(o) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
}

/// Symmetrized `2 − 2·cos(prediction, target projection)` averaged over
/// pairs and its gradient for the online network. Lies in `[0, 4]`.
pub fn byol_loss_and_grad(
    online: &OnlineNetwork,
    target: &TargetNetwork,
    windows: &[WindowPair<'_>],
) -> Result<(f64, OnlineNetwork)> {
    if windows.is_empty() || !windows.len().is_multiple_of(2) {
        return Err(Error::Shape("views come in anchor/positive halves".into()));
    }
    let (z, trace) = encode_batch(&online.encoder, windows)?;
    let (p, ptrace) = online.projector.forward(&z.view());
    let (q, qtrace) = online.predictor.forward(&p.view());
    let (zt, _) = encode_batch(&target.encoder, windows)?;
    let (t, _) = target.projector.forward(&zt.view());
    let (q1, q2) = halves(&q);
    let (t1, t2) = halves(&t);
    let c12 = cosine_rows(&q1, &t2);
    let c21 = cosine_rows(&q2, &t1);
    let b = q1.nrows() as f64;
    let loss = (c12.iter().chain(&c21).map(|c| 2.0 - 2.0 * c).sum::<f64>()) / (2.0 * b);
    // ∂/∂cos of each term is −2, averaged over 2B terms
    let scale = Array1::from_elem(q1.nrows(), -1.0 / b);
    let dq = stack(
        &cosine_grad_a(&q1, &t2, &scale),
        &cosine_grad_a(&q2, &t1, &scale),
    );
    let mut grad = online.zeros_like();
    let dp = online
        .predictor
        .backward(&qtrace, &dq.view(), &mut grad.predictor);
    let dz = online
        .projector
        .backward(&ptrace, &dp.view(), &mut grad.projector);
    encode_batch_backward(&online.encoder, &trace, &dz, &mut grad.encoder);
    Ok((loss, grad))
}

fn byol_loss(
    online: &OnlineNetwork,
    target: &TargetNetwork,
    windows: &[WindowPair<'_>],
) -> Result<f64> {
    let z = crate::encoder::encode_many(&online.encoder, windows)?;
    let (p, _) = online.projector.forward(&z.view());
    let (q, _) = online.predictor.forward(&p.view());
    let zt = crate::encoder::encode_many(&target.encoder, windows)?;
    let (t, _) = target.projector.forward(&zt.view());
    let (q1, q2) = halves(&q);
    let (t1, t2) = halves(&t);
    let c = cosine_rows(&q1, &t2).sum() + cosine_rows(&q2, &t1).sum();
    Ok(2.0 - c / q1.nrows() as f64)
}

/// One optimizer step on a batch of positive pairs followed by the EMA update.
pub fn byol_step(
    dataset: &LabeledDataset,
    pairs: &[PositivePair],
    params: &mut ByolParams,
    adam: &mut AdamState,
    tconfig: &TrainConfig,
) -> Result<f64> {
    let windows = pair_windows(dataset, pairs)?;
    let (loss, grad) = byol_loss_and_grad(&params.online, &params.target, &windows)?;
    adam_step(&mut params.online, &grad, adam, &tconfig.adam())?;
    params.ema_update();
    Ok(loss)
}

/// Shared encoder, projector and predictor.
pub type SimSiamParams = OnlineNetwork;

/// `½[−cos(pred(p₁), sg(p₂)) − cos(pred(p₂), sg(p₁))]` averaged over pairs,
/// with gradients only through the predictor branches. Lies in `[−1, 1]`.
pub fn simsiam_loss_and_grad(
    params: &SimSiamParams,
    windows: &[WindowPair<'_>],
) -> Result<(f64, SimSiamParams)> {
    if windows.is_empty() || !windows.len().is_multiple_of(2) {
        return Err(Error::Shape("views come in anchor/positive halves".into()));
    }
    let (z, trace) = encode_batch(&params.encoder, windows)?;
    let (p, ptrace) = params.projector.forward(&z.view());
    let (q, qtrace) = params.predictor.forward(&p.view());
    let (q1, q2) = halves(&q);
    let (p1, p2) = halves(&p);
    let c12 = cosine_rows(&q1, &p2);
    let c21 = cosine_rows(&q2, &p1);
    let b = q1.nrows() as f64;
    let loss = -(c12.sum() + c21.sum()) / (2.0 * b);
    let scale = Array1::from_elem(q1.nrows(), -1.0 / (2.0 * b));
    let dq = stack(
        &cosine_grad_a(&q1, &p2, &scale),
        &cosine_grad_a(&q2, &p1, &scale),
    );
    let mut grad = params.zeros_like();
    // detached targets contribute nothing to ∂L/∂p beyond the predictor path
    let dp = params
        .predictor
        .backward(&qtrace, &dq.view(), &mut grad.predictor);
    let dz = params
        .projector
        .backward(&ptrace, &dp.view(), &mut grad.projector);
    encode_batch_backward(&params.encoder, &trace, &dz, &mut grad.encoder);
    Ok((loss, grad))
}

fn simsiam_loss(params: &SimSiamParams, windows: &[WindowPair<'_>]) -> Result<f64> {
    let z = crate::encoder::encode_many(&params.encoder, windows)?;
    let (p, _) = params.projector.forward(&z.view());
    let (q, _) = params.predictor.forward(&p.view());
    let (q1, q2) = halves(&q);
    let (p1, p2) = halves(&p);
    Ok(-(cosine_rows(&q1, &p2).sum() + cosine_rows(&q2, &p1).sum()) / (2.0 * q1.nrows() as f64))
}

pub fn simsiam_step(
    dataset: &LabeledDataset,
    pairs: &[PositivePair],
    params: &mut SimSiamParams,
    adam: &mut AdamState,
    tconfig: &TrainConfig,
) -> Result<f64> {
    let windows = pair_windows(dataset, pairs)?;
    let (loss, grad) = simsiam_loss_and_grad(params, &windows)?;
    adam_step(params, &grad, adam, &tconfig.adam())?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairMethod {
    Byol,
    SimSiam,
}

struct PairObjective<'a> {
    method: PairMethod,
    dataset: &'a LabeledDataset,
    train: Vec<usize>,
    cfg: &'a TrainConfig,
    cache: HalfwidthCache,
    validation: Vec<PositivePair>,
    target: Option<TargetNetwork>,
    tau: f64,
}

impl<'a> PairObjective<'a> {
    fn new(
        method: PairMethod,
        dataset: &'a LabeledDataset,
        train: Vec<usize>,
        val: &[usize],
        cfg: &'a TrainConfig,
        target: Option<TargetNetwork>,
        tau: f64,
    ) -> Result<Self> {
        let mut cache = HalfwidthCache::new();
        let mut rng = stream(cfg.seed, "train/validation", 0);
        let validation = draw_positive_pairs(
            dataset,
            val,
            cfg.anchors_per_sample,
            &cfg.neighborhood,
            &mut cache,
            &mut rng,
        )?;
        Ok(Self {
            method,
            dataset,
            train,
            cfg,
            cache,
            validation,
            target,
            tau,
        })
    }

    fn loss(&self, model: &OnlineNetwork, pairs: &[PositivePair]) -> Result<f64> {
        let windows = pair_windows(self.dataset, pairs)?;
        match (self.method, &self.target) {
            (PairMethod::Byol, Some(target)) => byol_loss(model, target, &windows),
            _ => simsiam_loss(model, &windows),
        }
    }
}

impl Objective for PairObjective<'_> {
    type Model = OnlineNetwork;
    type Batch = Vec<PositivePair>;

    fn epoch_batches(&mut self, epoch: usize) -> Result<Vec<Self::Batch>> {
        let mut rng = stream(self.cfg.seed, "train/epoch", epoch as u64);
        let pairs = draw_positive_pairs(
            self.dataset,
            &self.train,
            self.cfg.anchors_per_sample,
            &self.cfg.neighborhood,
            &mut self.cache,
            &mut rng,
        )?;
        Ok(pairs
            .chunks(self.cfg.batch_size)
            .map(<[PositivePair]>::to_vec)
            .collect())
    }

    fn loss_and_grad(
        &self,
        model: &OnlineNetwork,
        batch: &Vec<PositivePair>,
    ) -> Result<(f64, OnlineNetwork)> {
        let windows = pair_windows(self.dataset, batch)?;
        match (self.method, &self.target) {
            (PairMethod::Byol, Some(target)) => byol_loss_and_grad(model, target, &windows),
            _ => simsiam_loss_and_grad(model, &windows),
        }
    }

    fn validation_loss(&self, model: &OnlineNetwork) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.validation.chunks(64) {
            total += self.loss(model, chunk)? * chunk.len() as f64;
        }
        Ok(Some(total / self.validation.len() as f64))
    }

    fn after_step(&mut self, model: &OnlineNetwork) {
        if let Some(target) = &mut self.target {
            ema(target, model, self.tau);
        }
    }

    fn extra_state(&self) -> serde_json::Value {
        serde_json::to_value(&self.target).unwrap_or(serde_json::Value::Null)
    }

    fn restore_extra_state(&mut self, state: &serde_json::Value) -> Result<()> {
        if self.method == PairMethod::Byol {
            self.target = Some(
                serde_json::from_value(state.clone())
                    .map_err(|e| Error::Config(format!("checkpoint target network: {e}")))?,
            );
        }
        Ok(())
    }
}

fn train_pairs(
    method: PairMethod,
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    tau: f64,
    train: &[usize],
    val: &[usize],
) -> Result<(OnlineNetwork, Option<TargetNetwork>, TrainReport)> {
    tconfig.validate()?;
    econfig.validate()?;
    if dataset.n_features() != econfig.n_nodes {
        return Err(Error::Shape(format!(
            "dataset has {} features, encoder expects {}",
            dataset.n_features(),
            econfig.n_nodes
        )));
    }
    if train.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let name = match method {
        PairMethod::Byol => "byol",
        PairMethod::SimSiam => "simsiam",
    };
    let params = ByolParams::init(econfig, tau, &mut stream(tconfig.seed, "init", 0))?;
    let target = (method == PairMethod::Byol).then(|| params.target.clone());
    let report = new_report(
        name,
        tconfig,
        econfig,
        params.online.param_count(),
        train,
        val,
    );
    let mut objective =
        PairObjective::new(method, dataset, train.to_vec(), val, tconfig, target, tau)?;
    let ck = run_training(
        &mut objective,
        initial_checkpoint(params.online, report),
        tconfig,
        |_| Ok(()),
    )?;
    Ok((ck.best_model, objective.target, ck.report))
}

/// BYOL on neighbouring windows of the `train` samples. Returns the online
/// network at its best validation epoch and the final target network.
pub fn train_byol_with(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    tau: f64,
    train: &[usize],
    val: &[usize],
) -> Result<(OnlineNetwork, TargetNetwork, TrainReport)> {
    let (online, target, report) =
        train_pairs(PairMethod::Byol, dataset, econfig, tconfig, tau, train, val)?;
    Ok((online, target.expect("BYOL keeps a target network"), report))
}

pub fn train_byol(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    tau: f64,
) -> Result<(OnlineNetwork, TargetNetwork, TrainReport)> {
    let (train, val) = split_samples(dataset.len(), tconfig.validation_fraction, tconfig.seed);
    train_byol_with(dataset, econfig, tconfig, tau, &train, &val)
}

pub fn train_simsiam_with(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    train: &[usize],
    val: &[usize],
) -> Result<(SimSiamParams, TrainReport)> {
    let (online, _, report) = train_pairs(
        PairMethod::SimSiam,
        dataset,
        econfig,
        tconfig,
        DEFAULT_TAU,
        train,
        val,
    )?;
    Ok((online, report))
}

pub fn train_simsiam(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
) -> Result<(SimSiamParams, TrainReport)> {
    let (train, val) = split_samples(dataset.len(), tconfig.validation_fraction, tconfig.seed);
    train_simsiam_with(dataset, econfig, tconfig, &train, &val)
}

/// Encoder with a linear classification head, trained end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedModel {
    pub encoder: EncoderParams,
    pub head: Dense,
}

impl Parameters for SupervisedModel {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.encoder.tensors();
        self.head
            .push_tensors(&mut out, "classifier.weight", "classifier.bias");
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        self.head
            .push_tensors_mut(&mut out, "classifier.weight", "classifier.bias");
        out
    }
}

/// Windows per supervised minibatch.
pub const SUPERVISED_BATCH: usize = 32;

pub fn supervised_loss_and_grad(
    model: &SupervisedModel,
    windows: &[WindowPair<'_>],
    labels: &[usize],
) -> Result<(f64, SupervisedModel)> {
    let (z, trace) = encode_batch(&model.encoder, windows)?;
    let logits = model.head.forward(&z.view());
    let (loss, dlogits) = cross_entropy(&logits, labels);
    let mut grad = model.zeros_like();
    let dz = model
        .head
        .backward(&z.view(), &dlogits.view(), &mut grad.head);
    encode_batch_backward(&model.encoder, &trace, &dz, &mut grad.encoder);
    Ok((loss, grad))
}

struct SupervisedObjective<'a> {
    dataset: &'a LabeledDataset,
    train: Vec<LabeledWindow>,
    val: Vec<LabeledWindow>,
    seed: u64,
}

impl SupervisedObjective<'_> {
    fn windows(&self, lw: &[LabeledWindow]) -> Result<(Vec<WindowPair<'_>>, Vec<usize>)> {
        let w = self.dataset.window_width();
        let windows = lw
            .iter()
            .map(|l| self.dataset.samples()[l.sample].window(l.start, w))
            .collect::<Result<_>>()?;
        Ok((windows, lw.iter().map(|l| l.label).collect()))
    }
}

impl Objective for SupervisedObjective<'_> {
    type Model = SupervisedModel;
    type Batch = Vec<LabeledWindow>;

    fn epoch_batches(&mut self, epoch: usize) -> Result<Vec<Self::Batch>> {
        let mut order = self.train.clone();
        order.shuffle(&mut stream(self.seed, "train/epoch", epoch as u64));
        Ok(order
            .chunks(SUPERVISED_BATCH)
            .map(<[LabeledWindow]>::to_vec)
            .collect())
    }

    fn loss_and_grad(
        &self,
        model: &SupervisedModel,
        batch: &Vec<LabeledWindow>,
    ) -> Result<(f64, SupervisedModel)> {
        let (windows, labels) = self.windows(batch)?;
        supervised_loss_and_grad(model, &windows, &labels)
    }

    fn validation_loss(&self, model: &SupervisedModel) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (windows, labels) = self.windows(&self.val)?;
        let z = crate::encoder::encode_many(&model.encoder, &windows)?;
        Ok(Some(
            cross_entropy(&model.head.forward(&z.view()), &labels).0,
        ))
    }
}

/// Supervised reference on explicit train/validation samples.
pub fn train_supervised_with(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    train: &[usize],
    val: &[usize],
) -> Result<(SupervisedModel, TrainReport)> {
    tconfig.validate()?;
    econfig.validate()?;
    let train_windows = labeled_windows(dataset, train)?;
    let val_windows = labeled_windows(dataset, val)?;
    if train_windows.is_empty() {
        return Err(Error::Empty("no labeled training windows".into()));
    }
    let mut rng = stream(tconfig.seed, "init", 0);
    let model = SupervisedModel {
        encoder: init_encoder(econfig, &mut rng)?,
        head: Dense::init(econfig.repr_dim, dataset.n_states(), &mut rng),
    };
    let report = new_report(
        "supervised",
        tconfig,
        econfig,
        model.param_count(),
        train,
        val,
    );
    let mut objective = SupervisedObjective {
        dataset,
        train: train_windows,
        val: val_windows,
        seed: tconfig.seed,
    };
    let ck = run_training(
        &mut objective,
        initial_checkpoint(model, report),
        tconfig,
        |_| Ok(()),
    )?;
    Ok((ck.best_model, ck.report))
}

pub fn train_supervised(
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
) -> Result<(SupervisedModel, TrainReport)> {
    let (train, val) = split_samples(dataset.len(), tconfig.validation_fraction, tconfig.seed);
    train_supervised_with(dataset, econfig, tconfig, &train, &val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::synth::{generate_dataset, SynthConfig};
    use crate::training::finite_diff_check;
    use ndarray::array;

    fn tiny() -> LabeledDataset {
        generate_dataset(&SynthConfig {
            length: 120,
            n_samples: 3,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn pairs(n: usize, seed: u64) -> Vec<PositivePair> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| PositivePair {
                sample: rng.random_range(0..3),
                anchor: rng.random_range(0..=100),
                positive: rng.random_range(0..=100),
            })
            .collect()
    }

    #[test]
    fn cosine_of_parallel_and_orthogonal_rows() {
        let a = array![[1.0, 0.0], [2.0, 2.0], [0.0, 0.0]];
        let b = array![[0.0, 3.0], [1.0, 1.0], [1.0, 0.0]];
        let c = cosine_rows(&a, &b);
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 1.0).abs() < 1e-15);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn ema_extremes_and_geometric_decay() {
        let cfg = EncoderConfig::synthetic();
        let mut p = ByolParams::init(&cfg, 1.0, &mut seeded(1)).unwrap();
        p.online = OnlineNetwork::init(&cfg, &mut seeded(2)).unwrap();
        let before = p.target.clone();
        p.ema_update();
        assert_eq!(p.target, before);

        p.tau = 0.0;
        p.ema_update();
        assert_eq!(p.target.encoder, p.online.encoder);
        assert_eq!(p.target.projector, p.online.projector);

        let mut q = ByolParams::init(&cfg, 0.9, &mut seeded(1)).unwrap();
        q.online = OnlineNetwork::init(&cfg, &mut seeded(2)).unwrap();
        let online: Vec<f64> = q
            .online
            .tensors()
            .iter()
            .take(q.target.tensors().len())
            .flat_map(|(_, t)| t.to_vec())
            .collect();
        let gap0: Vec<f64> = q
            .target
            .flatten()
            .iter()
            .zip(&online)
            .map(|(a, b)| a - b)
            .collect();
        for _ in 0..5 {
            q.ema_update();
        }
        for ((t, o), g0) in q.target.flatten().iter().zip(&online).zip(&gap0) {
            assert!(((t - o) - 0.9f64.powi(5) * g0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_bounded_and_identical_views_are_optimal() {
        let data = tiny();
        let cfg = EncoderConfig::synthetic();
        let byol = ByolParams::init(&cfg, DEFAULT_TAU, &mut seeded(4)).unwrap();
        for seed in 0..5 {
            let w = pair_windows(&data, &pairs(6, seed)).unwrap();
            let (l, _) = byol_loss_and_grad(&byol.online, &byol.target, &w).unwrap();
            assert!((0.0..=4.0).contains(&l));
            let (s, _) = simsiam_loss_and_grad(&byol.online, &w).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
        // identity-like predictor: prediction equals projection when the second layer
        // copies a rectified copy of a non-negative input
        let mut net = byol.online.clone();
        net.projector.second.bias.fill(10.0);
        net.predictor.first.weight = Array2::eye(HEAD_WIDTH);
        net.predictor.first.bias.fill(0.0);
        net.predictor.second.weight = Array2::eye(HEAD_WIDTH);
        net.predictor.second.bias.fill(0.0);
        let same: Vec<PositivePair> = pairs(4, 9)
            .into_iter()
            .map(|p| PositivePair {
                positive: p.anchor,
                ..p
            })
            .collect();
        let w = pair_windows(&data, &same).unwrap();
        let target = TargetNetwork {
            encoder: net.encoder.clone(),
            projector: net.projector.clone(),
        };
        let (l, _) = byol_loss_and_grad(&net, &target, &w).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        let (s, _) = simsiam_loss_and_grad(&net, &w).unwrap();
        assert!((s + 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn byol_gradient_matches_finite_differences() {
        let data = tiny();
        let p = ByolParams::init(&EncoderConfig::synthetic(), DEFAULT_TAU, &mut seeded(5)).unwrap();
        let mut target = p.target.clone();
        ema(
            &mut target,
            &OnlineNetwork::init(&EncoderConfig::synthetic(), &mut seeded(6)).unwrap(),
            0.5,
        );
        let w = pair_windows(&data, &pairs(2, 1)).unwrap();
        let (_, grad) = byol_loss_and_grad(&p.online, &target, &w).unwrap();
        let r = finite_diff_check(
            |o: &OnlineNetwork| byol_loss(o, &target, &w).unwrap(),
            &p.online,
            &grad,
            1e-5,
            20,
            &mut seeded(7),
        );
        assert!(r.max_rel_error < 1e-4, "{r:#?}");
    }

    #[test]
    fn simsiam_gradient_stops_at_the_detached_branch() {
        let data = tiny();
        let net = OnlineNetwork::init(&EncoderConfig::synthetic(), &mut seeded(8)).unwrap();
        let w = pair_windows(&data, &pairs(2, 2)).unwrap();
        let (_, grad) = simsiam_loss_and_grad(&net, &w).unwrap();
        // targets frozen at the current parameters: the loss whose gradient this must be
        let z0 = crate::encoder::encode_many(&net.encoder, &w).unwrap();
        let (p0, _) = net.projector.forward(&z0.view());
        let (p1, p2) = halves(&p0);
        let frozen = |n: &OnlineNetwork| {
            let z = crate::encoder::encode_many(&n.encoder, &w).unwrap();
            let (p, _) = n.projector.forward(&z.view());
            let (q, _) = n.predictor.forward(&p.view());
            let (q1, q2) = halves(&q);
            -(cosine_rows(&q1, &p2).sum() + cosine_rows(&q2, &p1).sum()) / (2.0 * q1.nrows() as f64)
        };
        let r = finite_diff_check(frozen, &net, &grad, 1e-5, 20, &mut seeded(9));
        assert!(r.max_rel_error < 1e-4, "{r:#?}");
        // and it differs from the gradient that would flow through both branches
        let full = finite_diff_check(
            |n: &OnlineNetwork| simsiam_loss(n, &w).unwrap(),
            &net,
            &grad,
            1e-5,
            20,
            &mut seeded(9),
        );
        assert!(full.max_rel_error > 1e-3);
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let data = tiny();
        let mut rng = seeded(10);
        let cfg = EncoderConfig::synthetic();
        let model = SupervisedModel {
            encoder: init_encoder(&cfg, &mut rng).unwrap(),
            head: Dense::init(8, 4, &mut rng),
        };
        let lw = labeled_windows(&data, &[0]).unwrap();
        let w: Vec<_> = lw
            .iter()
            .take(4)
            .map(|l| data.samples()[0].window(l.start, 20).unwrap())
            .collect();
        let labels: Vec<usize> = lw.iter().take(4).map(|l| l.label).collect();
        let (_, grad) = supervised_loss_and_grad(&model, &w, &labels).unwrap();
        let loss = |m: &SupervisedModel| {
            let z = crate::encoder::encode_many(&m.encoder, &w).unwrap();
            cross_entropy(&m.head.forward(&z.view()), &labels).0
        };
        let r = finite_diff_check(loss, &model, &grad, 1e-5, 20, &mut seeded(11));
        // O(1) cross-entropy values limit the precision of differences for the smallest recurrent gradients
        assert!(r.max_rel_error < 1e-3, "{r:#?}");
    }

    #[test]
    fn parameter_counts() {
        let online = OnlineNetwork::init(&EncoderConfig::synthetic(), &mut seeded(1)).unwrap();
        assert_eq!(
            online.param_count(),
            33_352 + (8 * 128 + 128 + 128 * 128 + 128) + 2 * (128 * 128 + 128)
        );
        let sup = SupervisedModel {
            encoder: online.encoder.clone(),
            head: Dense::init(8, 4, &mut seeded(2)),
        };
        assert_eq!(sup.param_count(), 33_352 + 36);
    }

    #[test]
    fn positive_pairs_need_no_negative_region() {
        let data = tiny();
        let mut cache = HalfwidthCache::new();
        let cfg = NeighborhoodConfig {
            max_delta_windows: 100,
            ..NeighborhoodConfig::default()
        };
        let p =
            draw_positive_pairs(&data, &[0, 1, 2], 5, &cfg, &mut cache, &mut seeded(1)).unwrap();
        assert_eq!(p.len(), 15);
        assert!(p.iter().all(|q| q.positive <= 100 && q.anchor <= 100));
    }
}
