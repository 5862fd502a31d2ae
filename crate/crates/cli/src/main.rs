use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use graphtnc::data::{load_dataset, read_json, save_dataset, write_json, LabeledDataset};
use graphtnc::eeg::{ingest_from_spec, EegIngestSpec};
use graphtnc::encoder::EncoderConfig;
use graphtnc::error::{Error, Result};
use graphtnc::eval::{
    evaluate, evaluate_scores, export_embeddings, softmax, train_probe, ProbeConfig, ProbeParams,
};
use graphtnc::experiment::{
    default_encoder, load_spec, partition_samples, run_experiment, run_method,
    window_representations, DataSource, Method, Partition, Stamped, TrainedModel,
};
use graphtnc::rng::digest_json;
use graphtnc::synth::{generate_dataset, SynthConfig};
use graphtnc::training::{
    gradcheck_tnc, load_checkpoint, save_checkpoint, train_tnc_with, TncModel, TrainConfig,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// GraphTNC: contrastive representations of multivariate time series on dynamic graphs.
#[derive(Parser, Debug)]
#[command(name = "graphtnc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Build a dataset directory from EEG recordings.
    IngestEeg(IngestArgs),
    /// Train one method on the training partition of a dataset.
    Train(TrainArgs),
    /// Fit a linear probe on frozen representations of a trained run.
    Probe(ProbeArgs),
    /// Evaluate a trained run on its test partition.
    Eval(RunArgs),
    /// Run every method over several splits and write a comparison table.
    Compare(CompareArgs),
    /// Check analytic gradients of the full loss against central differences.
    Gradcheck(GradcheckArgs),
    /// Write window representations of a trained run as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Graph/signal correlation.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    window_width: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder configuration JSON.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mixing weight for unlabeled positives among negatives.
    #[arg(long)]
    m: Option<f64>,
    /// Continue from a checkpoint written by an earlier run (graphtnc and tnc).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Output directory of `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Partition3 {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Partition3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Graphtnc,
    Tnc,
    Byol,
    Simsiam,
    Supervised,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Graphtnc => Method::Graphtnc,
            MethodArg::Tnc => Method::Tnc,
            MethodArg::Byol => Method::Byol,
            MethodArg::Simsiam => Method::Simsiam,
            MethodArg::Supervised => Method::Supervised,
        }
    }
}

/// Resolved settings of a `train` invocation, stored as `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSpec {
    method: Method,
    data: PathBuf,
    encoder: EncoderConfig,
    train: TrainConfig,
    tau: f64,
    partition: Partition,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GradcheckConfig {
    synth: Option<SynthConfig>,
    encoder: Option<EncoderConfig>,
    m: Option<f64>,
    anchors: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::IngestEeg(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => return gradcheck(a),
        Command::ExportEmbeddings(a) => export(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(r) = a.r {
        cfg.r = r;
    }
    if let Some(n) = a.n_samples {
        cfg.n_samples = n;
    }
    if let Some(t) = a.length {
        cfg.length = t;
    }
    let dataset = generate_dataset(&cfg)?;
    save_dataset(&dataset, &a.out)?;
    write_json(
        &a.out.join("synth_config.json"),
        &Stamped::new(&digest_json(&cfg), &cfg),
    )?;
    println!(
        "wrote {} samples of length {} to {}",
        dataset.len(),
        dataset.series_len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut spec: EegIngestSpec = read_json(&a.config)?;
    if let Some(w) = a.window_width {
        spec.window_width = w;
    }
    let dataset = ingest_from_spec(&spec)?;
    save_dataset(&dataset, &a.out)?;
    write_json(
        &a.out.join("ingest_spec.json"),
        &Stamped::new(&digest_json(&spec), &spec),
    )?;
    println!(
        "wrote {} samples of length {} to {}",
        dataset.len(),
        dataset.series_len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let method = Method::from(a.method);
    let mut tconfig: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    tconfig.seed = a.seed;
    if let Some(e) = a.epochs {
        tconfig.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        tconfig.learning_rate = lr;
    }
    if let Some(m) = a.m {
        tconfig.m = m;
    }
    let encoder = match &a.encoder {
        Some(p) => read_json(p)?,
        None => default_encoder(
            &DataSource::DatasetDir(a.data.clone()),
            dataset.n_features(),
        ),
    };
    let partition = partition_samples(dataset.len(), [0.6, 0.2], a.seed)?;
    let spec = RunSpec {
        method,
        data: a.data.clone(),
        encoder,
        train: tconfig,
        tau: graphtnc::baselines::DEFAULT_TAU,
        partition,
    };
    let digest = digest_json(&spec);
    write_json(&a.out.join("run.json"), &Stamped::new(&digest, &spec))?;
    let started = Instant::now();

    let (model, report) = match (method, &a.resume) {
        (Method::Graphtnc | Method::Tnc, _) => {
            let ecfg = if method == Method::Tnc {
                spec.encoder.signal_only()
            } else {
                spec.encoder.clone()
            };
            let resume = a
                .resume
                .as_deref()
                .map(load_checkpoint::<TncModel>)
                .transpose()?;
            let ck_path = a.out.join("checkpoint.json");
            let ck = train_tnc_with(
                &dataset,
                &ecfg,
                &spec.train,
                &spec.partition.train,
                &spec.partition.val,
                resume,
                |ck| save_checkpoint(ck, &ck_path),
            )?;
            (
                TrainedModel {
                    method,
                    encoder: ck.best_model.encoder,
                    head: None,
                },
                ck.report,
            )
        }
        (_, Some(_)) => {
            return Err(Error::Config(format!(
                "--resume is not supported for {method}"
            )))
        }
        _ => run_method(
            method,
            &dataset,
            &spec.encoder,
            &spec.train,
            spec.tau,
            &spec.partition.train,
            &spec.partition.val,
        )?,
    };
    write_json(&a.out.join("model.json"), &Stamped::new(&digest, &model))?;
    write_json(&a.out.join("report.json"), &Stamped::new(&digest, &report))?;
    write_json(
        &a.out.join("timing.json"),
        &serde_json::json!({ "seconds": started.elapsed().as_secs_f64() }),
    )?;
    println!(
        "{method}: {} epochs, best epoch {:?}, best validation loss {:?}",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_loss
    );
    Ok(())
}

struct LoadedRun {
    digest: String,
    spec: RunSpec,
    model: TrainedModel,
    dataset: LabeledDataset,
}

fn load_run(a: &RunArgs) -> Result<LoadedRun> {
    let spec: Stamped<RunSpec> = read_json(&a.run.join("run.json"))?;
    let model: Stamped<TrainedModel> = read_json(&a.run.join("model.json"))?;
    if model.spec_digest != spec.spec_digest {
        return Err(Error::Config(
            "model.json was not produced by run.json in the same directory".into(),
        ));
    }
    let dataset = load_dataset(&a.data)?;
    let n = spec.content.partition.train.len()
        + spec.content.partition.val.len()
        + spec.content.partition.test.len();
    if n != dataset.len() {
        return Err(Error::Shape(format!(
            "run was trained on {n} samples, dataset has {}",
            dataset.len()
        )));
    }
    Ok(LoadedRun {
        digest: spec.spec_digest,
        spec: spec.content,
        model: model.content,
        dataset,
    })
}

fn probe(a: ProbeArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let mut cfg: ProbeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ProbeConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let p = &run.spec.partition;
    let (z_train, y_train, _) = window_representations(&run.model.encoder, &run.dataset, &p.train)?;
    let (z_val, y_val, _) = window_representations(&run.model.encoder, &run.dataset, &p.val)?;
    let val = (!y_val.is_empty()).then_some((&z_val, y_val.as_slice()));
    let probe = train_probe((&z_train, &y_train), val, run.dataset.n_states(), &cfg)?;
    write_json(
        &a.run.run.join("probe.json"),
        &Stamped::new(&run.digest, &probe),
    )?;
    println!("probe fitted on {} training windows", y_train.len());
    Ok(())
}

fn eval(a: RunArgs) -> Result<()> {
    let run = load_run(&a)?;
    let (z, y, _) =
        window_representations(&run.model.encoder, &run.dataset, &run.spec.partition.test)?;
    let probe_path = a.run.join("probe.json");
    let result = if probe_path.exists() {
        let probe: Stamped<ProbeParams> = read_json(&probe_path)?;
        evaluate(&probe.content, &z, &y)?
    } else if let Some(head) = &run.model.head {
        evaluate_scores(&softmax(&head.forward(&z.view())), &y)?
    } else {
        return Err(Error::Config(format!(
            "no probe in {}; run `probe` first",
            a.run.display()
        )));
    };
    write_json(
        &a.run.join("eval.json"),
        &Stamped::new(&run.digest, &result),
    )?;
    println!(
        "accuracy {:.4}  auprc {:.4}  ({} test windows)",
        result.accuracy,
        result.auprc,
        y.len()
    );
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let p = &run.spec.partition;
    let samples: Vec<usize> = match a.split {
        Partition3::Train => p.train.clone(),
        Partition3::Val => p.val.clone(),
        Partition3::Test => p.test.clone(),
        Partition3::All => (0..run.dataset.len()).collect(),
    };
    let (z, y, _) = window_representations(&run.model.encoder, &run.dataset, &samples)?;
    export_embeddings(&z, &y, &a.out)?;
    println!("wrote {} representations to {}", y.len(), a.out.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut spec = load_spec(&a.config)?;
    spec.seed = a.seed;
    if let Some(n) = a.splits {
        spec.n_splits = n;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(out) = a.out {
        spec.output_dir = Some(out);
    }
    let report = run_experiment(&spec)?;
    println!(
        "{:<12}{:>18}{:>18}{:>12}",
        "method", "accuracy", "auprc", "p(auprc)"
    );
    for m in &report.methods {
        let p = m
            .auprc
            .wilcoxon_p_vs_graphtnc
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<12}{:>18}{:>18}{:>12}",
            m.method.name(),
            format!("{:.3} ± {:.3}", m.accuracy.mean, m.accuracy.std),
            format!("{:.3} ± {:.3}", m.auprc.mean, m.auprc.std),
            p
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg: GradcheckConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    let synth = cfg.synth.unwrap_or(SynthConfig {
        length: 160,
        n_samples: 6,
        ..SynthConfig::default()
    });
    let dataset = generate_dataset(&SynthConfig {
        seed: a.seed,
        ..synth
    })?;
    let encoder = cfg.encoder.unwrap_or_else(|| EncoderConfig {
        n_nodes: dataset.n_features(),
        ..EncoderConfig::synthetic()
    });
    let report = gradcheck_tnc(
        &dataset,
        &encoder,
        a.seed,
        cfg.anchors.unwrap_or(1),
        cfg.m.unwrap_or(0.05),
    )?;
    for g in &report.groups {
        println!(
            "{:<28}{:>6} coords  {:.3e}",
            g.group, g.checked, g.max_rel_error
        );
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    Ok(if report.max_rel_error < GRADCHECK_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
