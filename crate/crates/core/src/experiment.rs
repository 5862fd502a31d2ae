//! Multi-split experiments: train every requested method on each split,
//! probe frozen encoders, and compare methods with paired statistics.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_byol_with, train_simsiam_with, train_supervised_with, DEFAULT_TAU};
use crate::data::{load_dataset, write_json, LabeledDataset};
use crate::eeg::{ingest_from_spec, EegIngestSpec};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    bootstrap_ci, embed_windows, evaluate, evaluate_scores, export_embeddings, labeled_windows,
    mean_std, softmax, train_probe, wilcoxon_signed_rank, EvalResult, LabeledWindow, ProbeConfig,
    ProbeParams, DEFAULT_BOOTSTRAP_RESAMPLES,
};
use crate::nn::Dense;
use crate::rng::{derive_seed, digest_json, stream};
use crate::synth::{generate_dataset, SynthConfig};
use crate::training::{train_tnc_with, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Graphtnc,
    Tnc,
    Byol,
    Simsiam,
    Supervised,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Graphtnc,
        Method::Tnc,
        Method::Byol,
        Method::Simsiam,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Graphtnc => "graphtnc",
            Method::Tnc => "tnc",
            Method::Byol => "byol",
            Method::Simsiam => "simsiam",
            Method::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Regenerated for every split with the split seed.
    Synthetic(SynthConfig),
    DatasetDir(PathBuf),
    Eeg(EegIngestSpec),
}

fn default_splits() -> usize {
    10
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_resamples() -> usize {
    DEFAULT_BOOTSTRAP_RESAMPLES
}

fn default_fractions() -> [f64; 2] {
    [0.6, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub methods: Vec<Method>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    /// Experiment seed; split seeds are derived from it unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Defaults to the synthetic architecture sized to the data (the EEG
    /// architecture for EEG sources).
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Train and validation fractions of the samples; the rest is test.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 2],
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(source: DataSource, methods: Vec<Method>) -> Self {
        Self {
            source,
            methods,
            n_splits: default_splits(),
            seed: 0,
            seeds: None,
            encoder: None,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            tau: default_tau(),
            bootstrap_resamples: default_resamples(),
            split_fractions: default_fractions(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.n_splits == 0 {
            return Err(Error::Config("need at least one split".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() < self.n_splits {
                return Err(Error::Config(format!(
                    "{} seeds for {} splits",
                    seeds.len(),
                    self.n_splits
                )));
            }
        }
        let [tr, va] = self.split_fractions;
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
            return Err(Error::Config(
                "split fractions must leave a non-empty test share".into(),
            ));
        }
        self.train.validate()
    }

    pub fn split_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s[..self.n_splits].to_vec(),
            None => (0..self.n_splits as u64)
                .map(|i| derive_seed(self.seed, "experiment/split", i))
                .collect(),
        }
    }

    /// Digest of everything that determines results; the output location is excluded.
    pub fn digest(&self) -> String {
        digest_json(&Self {
            output_dir: None,
            ..self.clone()
        })
    }
}

/// Sample-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition with at least one training and one test sample.
pub fn partition_samples(n: usize, fractions: [f64; 2], seed: u64) -> Result<Partition> {
    if n < 2 {
        return Err(Error::Empty(format!(
            "{n} samples cannot be split into train and test"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "experiment/partition", 0));
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 1);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - 1 - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Partition { train, val, test })
}

/// An artifact tagged with the digest of the spec that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub spec_digest: String,
    pub content: T,
}

impl<T> Stamped<T> {
    pub fn new(spec_digest: &str, content: T) -> Self {
        Self {
            spec_digest: spec_digest.to_owned(),
            content,
        }
    }
}

/// What a training run hands to evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub method: Method,
    pub encoder: EncoderParams,
    /// Classification head of the supervised reference.
    pub head: Option<Dense>,
}

/// Train one method on `train` samples with early stopping on `val` samples.
pub fn run_method(
    method: Method,
    dataset: &LabeledDataset,
    econfig: &EncoderConfig,
    tconfig: &TrainConfig,
    tau: f64,
    train: &[usize],
    val: &[usize],
) -> Result<(TrainedModel, TrainReport)> {
    let done = |encoder, head, report| {
        Ok((
            TrainedModel {
                method,
                encoder,
                head,
            },
            report,
        ))
    };
    match method {
        Method::Graphtnc | Method::Tnc => {
            let cfg = if method == Method::Tnc {
                econfig.signal_only()
            } else {
                econfig.clone()
            };
            let ck = train_tnc_with(dataset, &cfg, tconfig, train, val, None, |_| Ok(()))?;
            done(ck.best_model.encoder, None, ck.report)
        }
        Method::Byol => {
            let (online, _, report) = train_byol_with(dataset, econfig, tconfig, tau, train, val)?;
            done(online.encoder, None, report)
        }
        Method::Simsiam => {
            let (online, report) = train_simsiam_with(dataset, econfig, tconfig, train, val)?;
            done(online.encoder, None, report)
        }
        Method::Supervised => {
            let (model, report) = train_supervised_with(dataset, econfig, tconfig, train, val)?;
            done(model.encoder, Some(model.head), report)
        }
    }
}

/// Representations and labels of the non-overlapping windows of `samples`.
pub fn window_representations(
    encoder: &EncoderParams,
    dataset: &LabeledDataset,
    samples: &[usize],
) -> Result<(Array2<f64>, Vec<usize>, Vec<LabeledWindow>)> {
    let windows = labeled_windows(dataset, samples)?;
    let z = embed_windows(encoder, dataset, &windows)?;
    let labels = windows.iter().map(|w| w.label).collect();
    Ok((z, labels, windows))
}

/// Test-set metrics for a trained model: a linear probe on frozen
/// representations, or the supervised model's own head.
pub fn probe_and_evaluate(
    model: &TrainedModel,
    dataset: &LabeledDataset,
    partition: &Partition,
    probe_cfg: &ProbeConfig,
) -> Result<(EvalResult, Option<ProbeParams>, Array2<f64>, Vec<usize>)> {
    let (z_test, y_test, _) = window_representations(&model.encoder, dataset, &partition.test)?;
    if let Some(head) = &model.head {
        let scores = softmax(&head.forward(&z_test.view()));
        return Ok((evaluate_scores(&scores, &y_test)?, None, z_test, y_test));
    }
    let (z_train, y_train, _) = window_representations(&model.encoder, dataset, &partition.train)?;
    let (z_val, y_val, _) = window_representations(&model.encoder, dataset, &partition.val)?;
    let val = (!y_val.is_empty()).then_some((&z_val, y_val.as_slice()));
    let probe = train_probe((&z_train, &y_train), val, dataset.n_states(), probe_cfg)?;
    Ok((
        evaluate(&probe, &z_test, &y_test)?,
        Some(probe),
        z_test,
        y_test,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub split: usize,
    pub seed: u64,
    pub method: Method,
    pub eval: EvalResult,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Paired signed-rank p-value against GraphTNC over splits.
    pub wilcoxon_p_vs_graphtnc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub param_count: usize,
    pub accuracy: MetricSummary,
    pub auprc: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub spec_digest: String,
    pub split_seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
}

impl ComparisonReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// `method,metric,mean,std,ci_low,ci_high,wilcoxon_p_vs_graphtnc`
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,metric,mean,std,ci_low,ci_high,wilcoxon_p_vs_graphtnc\n");
        for m in &self.methods {
            for (name, s) in [("accuracy", &m.accuracy), ("auprc", &m.auprc)] {
                let p = s
                    .wilcoxon_p_vs_graphtnc
                    .map(|p| p.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{name},{},{},{},{},{p}\n",
                    m.method, s.mean, s.std, s.ci_low, s.ci_high
                ));
            }
        }
        out
    }
}

fn load_source(source: &DataSource, split_seed: u64) -> Result<LabeledDataset> {
    match source {
        DataSource::Synthetic(cfg) => generate_dataset(&SynthConfig {
            seed: split_seed,
            ..cfg.clone()
        }),
        DataSource::DatasetDir(dir) => load_dataset(dir),
        DataSource::Eeg(spec) => ingest_from_spec(spec),
    }
}

/// Encoder configuration used when the spec does not give one.
pub fn default_encoder(source: &DataSource, n_features: usize) -> EncoderConfig {
    match source {
        DataSource::Eeg(_) => EncoderConfig {
            n_nodes: n_features,
            ..EncoderConfig::eeg()
        },
        _ => EncoderConfig {
            n_nodes: n_features,
            ..EncoderConfig::synthetic()
        },
    }
}

fn summarize(
    values: Vec<f64>,
    baseline: Option<&[f64]>,
    resamples: usize,
    seed: u64,
    label: &str,
) -> Result<MetricSummary> {
    let (mean, std) = mean_std(&values);
    let (ci_low, ci_high) = bootstrap_ci(&values, resamples, 0.95, &mut stream(seed, label, 0))?;
    let wilcoxon_p_vs_graphtnc = match baseline {
        Some(b) => Some(wilcoxon_signed_rank(b, &values)?.p_value),
        None => None,
    };
    Ok(MetricSummary {
        values,
        mean,
        std,
        ci_low,
        ci_high,
        wilcoxon_p_vs_graphtnc,
    })
}

/// Run every method on every split and aggregate. When `output_dir` is set,
/// per-run reports, models, evaluations and test embeddings are written as
/// each run finishes, followed by `comparison.json` and `comparison.csv`.
/// Wall-clock seconds go to `timing.json`, the only non-reproducible file.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    spec.validate()?;
    let digest = spec.digest();
    let seeds = spec.split_seeds();
    let out = spec.output_dir.as_deref();
    if let Some(dir) = out {
        write_json(&dir.join("spec.json"), spec)?;
    }
    let mut methods = spec.methods.clone();
    methods.dedup();
    let mut runs = Vec::new();
    let mut timing = Vec::new();
    let mut shared: Option<LabeledDataset> = None;
    for (split, &seed) in seeds.iter().enumerate() {
        let fresh;
        let dataset = match (&spec.source, &shared) {
            (DataSource::Synthetic(_), _) => {
                fresh = load_source(&spec.source, seed)?;
                &fresh
            }
            (_, Some(d)) => d,
            (_, None) => shared.insert(load_source(&spec.source, seed)?),
        };
        let partition = partition_samples(dataset.len(), spec.split_fractions, seed)?;
        let econfig = spec
            .encoder
            .clone()
            .unwrap_or_else(|| default_encoder(&spec.source, dataset.n_features()));
        let tconfig = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let probe_cfg = ProbeConfig {
            seed,
            ..spec.probe.clone()
        };
        for &method in &methods {
            let started = Instant::now();
            let (model, report) = run_method(
                method,
                dataset,
                &econfig,
                &tconfig,
                spec.tau,
                &partition.train,
                &partition.val,
            )?;
            let (eval, probe, z_test, y_test) =
                probe_and_evaluate(&model, dataset, &partition, &probe_cfg)?;
            if let Some(dir) = out {
                let run_dir = dir.join(format!("split_{split}")).join(method.name());
                write_json(
                    &run_dir.join("report.json"),
                    &Stamped::new(&digest, &report),
                )?;
                write_json(&run_dir.join("model.json"), &Stamped::new(&digest, &model))?;
                write_json(&run_dir.join("eval.json"), &Stamped::new(&digest, &eval))?;
                if let Some(p) = &probe {
                    write_json(&run_dir.join("probe.json"), &Stamped::new(&digest, p))?;
                }
                export_embeddings(&z_test, &y_test, &run_dir.join("embeddings_test.csv"))?;
                timing.push(serde_json::json!({ "split": split, "method": method, "seconds": started.elapsed().as_secs_f64() }));
                write_json(&dir.join("timing.json"), &timing)?;
            }
            runs.push(RunRecord {
                split,
                seed,
                method,
                eval,
                param_count: report.param_count,
                epochs_run: report.epochs.len(),
                best_epoch: report.best_epoch,
            });
        }
    }
    let metric = |m: Method, f: fn(&EvalResult) -> f64| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.method == m)
            .map(|r| f(&r.eval))
            .collect()
    };
    let has_graphtnc = methods.contains(&Method::Graphtnc);
    let mut summaries = Vec::new();
    for (i, &m) in methods.iter().enumerate() {
        let acc_base = (has_graphtnc && m != Method::Graphtnc)
            .then(|| metric(Method::Graphtnc, |e| e.accuracy));
        let auprc_base =
            (has_graphtnc && m != Method::Graphtnc).then(|| metric(Method::Graphtnc, |e| e.auprc));
        let param_count = runs
            .iter()
            .find(|r| r.method == m)
            .map_or(0, |r| r.param_count);
        let boot_seed = derive_seed(spec.seed, "experiment/bootstrap", i as u64);
        summaries.push(MethodSummary {
            method: m,
            param_count,
            accuracy: summarize(
                metric(m, |e| e.accuracy),
                acc_base.as_deref(),
                spec.bootstrap_resamples,
                boot_seed,
                "accuracy",
            )?,
            auprc: summarize(
                metric(m, |e| e.auprc),
                auprc_base.as_deref(),
                spec.bootstrap_resamples,
                boot_seed,
                "auprc",
            )?,
        });
    }
    let report = ComparisonReport {
        spec_digest: digest,
        split_seeds: seeds,
        methods: summaries,
        runs,
    };
    if let Some(dir) = out {
        write_json(&dir.join("comparison.json"), &report)?;
        let path = dir.join("comparison.csv");
        std::fs::write(&path, report.to_csv()).map_err(Error::io(&path))?;
    }
    Ok(report)
}

/// Load an experiment spec from JSON.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    crate::data::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_disjoint_and_covers_everything() {
        let p = partition_samples(30, [0.6, 0.2], 3).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (18, 6, 6));
        let mut all: Vec<usize> = p
            .train
            .iter()
            .chain(&p.val)
            .chain(&p.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_ne!(p, partition_samples(30, [0.6, 0.2], 4).unwrap());
        let small = partition_samples(2, [0.6, 0.2], 0).unwrap();
        assert_eq!(
            (small.train.len(), small.val.len(), small.test.len()),
            (1, 0, 1)
        );
        assert!(partition_samples(1, [0.6, 0.2], 0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("vicreg".parse::<Method>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::new(DataSource::Synthetic(SynthConfig::default()), vec![]);
        assert!(spec.validate().is_err());
        spec.methods = vec![Method::Graphtnc];
        spec.validate().unwrap();
        spec.seeds = Some(vec![1, 2]);
        assert!(spec.validate().is_err());
        spec.seeds = None;
        assert_eq!(spec.split_seeds().len(), 10);
        spec.split_fractions = [0.8, 0.2];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ExperimentSpec =
            serde_json::from_str(r#"{"source": {"dataset_dir": "d"}, "methods": ["tnc"]}"#)
                .unwrap();
        assert_eq!(spec.n_splits, 10);
        assert_eq!(spec.train, TrainConfig::default());
        assert_eq!(spec.split_fractions, [0.6, 0.2]);
    }
}
