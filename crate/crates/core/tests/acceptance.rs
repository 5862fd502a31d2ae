//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_QUICK=1` skips the two multi-split benchmark criteria.
//! The process fails when the set of failing criteria differs from
//! `EXPECTED_FAILURES`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use graphtnc::adf::{adf_test, adf_test_fixed_lag, default_max_lag};
use graphtnc::encoder::{init_encoder, param_count, EncoderConfig};
use graphtnc::eval::{
    average_precision, bootstrap_ci, wilcoxon_signed_rank, DEFAULT_BOOTSTRAP_RESAMPLES,
};
use graphtnc::experiment::{run_experiment, ComparisonReport, DataSource, ExperimentSpec, Method};
use graphtnc::nn::Parameters;
use graphtnc::rng::{seeded, stream};
use graphtnc::synth::{generate_dataset, SynthConfig};
use graphtnc::training::{
    gradcheck_tnc, save_checkpoint, split_samples, tnc_loss, train_tnc_with, DiscriminatorParams,
    TrainConfig,
};
use ndarray::Array1;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Parameter count quoted for the synthetic architecture. Counting its
/// tensors gives 64 fewer: the 128 → 8 output head holds 1,032 scalars.
const QUOTED_SYNTHETIC_PARAMS: usize = 33_416;
const EXPECTED_FAILURES: &[u32] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(n: usize, rng: &mut graphtnc::rng::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

fn parameter_counts() -> Outcome {
    let synth = EncoderConfig::synthetic();
    let eeg = EncoderConfig::eeg();
    let counted = |cfg: &EncoderConfig| param_count(&init_encoder(cfg, &mut seeded(0)).unwrap());
    let (s_closed, s_counted) = (synth.param_count(), counted(&synth));
    let (e_closed, e_counted) = (eeg.param_count(), counted(&eeg));
    let routes_agree = s_closed == s_counted && e_closed == e_counted;
    let s_band = (32_000..=36_000).contains(&s_counted);
    let s_exact = s_counted == QUOTED_SYNTHETIC_PARAMS;
    let e_band = (56_000..=62_000).contains(&e_counted);
    outcome(
        routes_agree && s_band && s_exact && e_band,
        format!(
            "synthetic {s_counted} (closed form {s_closed}, band {s_band}, equals {QUOTED_SYNTHETIC_PARAMS}: {s_exact}); \
             EEG {e_counted} (closed form {e_closed}, band {e_band})"
        ),
    )
}

fn loss_identity() -> Outcome {
    let mut rng = seeded(11);
    let disc = DiscriminatorParams::init(8, &mut rng).zeros_like();
    let mut vec8 = || Array1::from(normal(8, &mut rng));
    let anchor = vec8();
    let positives: Vec<_> = (0..5).map(|_| vec8()).collect();
    let negatives: Vec<_> = (0..5).map(|_| vec8()).collect();
    let target = 2.0 * std::f64::consts::LN_2;
    let mut worst = 0.0f64;
    for m in [0.0, 0.05, 0.5] {
        let loss = tnc_loss(&anchor.view(), &positives, &negatives, &disc, m).unwrap();
        worst = worst.max((loss - target).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max |loss − 2 ln 2| = {worst:.2e} over m ∈ {{0, 0.05, 0.5}}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut errors = Vec::new();
    for seed in [2u64, 3, 4] {
        let data = generate_dataset(&SynthConfig {
            length: 160,
            n_samples: 6,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let report = gradcheck_tnc(&data, &EncoderConfig::synthetic(), seed, 1, 0.05).unwrap();
        errors.push(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let listed: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error per seed [{}], {:.1}s",
            listed.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn mid_ranks_by_counting(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|u| *u < v).count() as f64;
            let equal = values.iter().filter(|u| *u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn wilcoxon_by_enumeration(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let ranks = mid_ranks_by_counting(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let observed: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        le += u64::from(w <= observed + 1e-9);
        ge += u64::from(w >= observed - 1e-9);
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0)
}

fn ap_by_thresholds(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected = scores.iter().filter(|&&s| s >= t).count();
        let hits = scores
            .iter()
            .zip(positive)
            .filter(|(&s, &p)| p && s >= t)
            .count();
        let recall = hits as f64 / total as f64;
        ap += (recall - prev) * hits as f64 / selected as f64;
        prev = recall;
    }
    Some(ap)
}

fn statistical_oracles() -> Outcome {
    let mut rng = seeded(2024);
    let mut wilcoxon_worst = 0.0f64;
    let mut wilcoxon_cases = 0;
    for n in 1..=12usize {
        for _ in 0..10 {
            // Small integer values force ties and zero differences.
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let oracle = if diffs.iter().all(|d| *d == 0.0) {
                1.0
            } else {
                wilcoxon_by_enumeration(&diffs)
            };
            wilcoxon_worst = wilcoxon_worst.max((r.p_value - oracle).abs());
            wilcoxon_cases += 1;
        }
    }
    let mut ap_worst = 0.0f64;
    let mut ap_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 / 5.0)
            .collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        match (
            average_precision(&scores, &positive),
            ap_by_thresholds(&scores, &positive),
        ) {
            (Some(a), Some(b)) => ap_worst = ap_worst.max((a - b).abs()),
            (None, None) => {}
            _ => ap_mismatch += 1,
        }
    }
    let covered = (0..100)
        .filter(|&trial| {
            let x = normal(30, &mut stream(77, "coverage/sample", trial));
            let (lo, hi) = bootstrap_ci(
                &x,
                DEFAULT_BOOTSTRAP_RESAMPLES,
                0.95,
                &mut stream(77, "coverage/bootstrap", trial),
            )
            .unwrap();
            lo <= 0.0 && 0.0 <= hi
        })
        .count();
    let pass = wilcoxon_worst < 1e-12
        && ap_worst <= 1e-10
        && ap_mismatch == 0
        && (90..=100).contains(&covered);
    outcome(
        pass,
        format!(
            "Wilcoxon vs enumeration max |Δp| {wilcoxon_worst:.1e} over {wilcoxon_cases} cases (n ≤ 12); \
             AUPRC vs threshold oracle max |Δ| {ap_worst:.1e} on 200 instances; bootstrap coverage {covered}/100"
        ),
    )
}

#[derive(serde::Deserialize)]
struct AdfCase {
    series: Vec<f64>,
    lag: usize,
    statistic: f64,
}

fn adf_behavior() -> Outcome {
    let white = (0..100)
        .filter(|&s| {
            let x = normal(200, &mut stream(5, "adf/white", s));
            adf_test(&x, default_max_lag(200)).unwrap().p_value < 0.05
        })
        .count();
    let walk = (0..100)
        .filter(|&s| {
            let mut acc = 0.0;
            let x: Vec<f64> = normal(200, &mut stream(5, "adf/walk", s))
                .into_iter()
                .map(|e| {
                    acc += e;
                    acc
                })
                .collect();
            adf_test(&x, default_max_lag(200)).unwrap().p_value < 0.05
        })
        .count();
    let cases: Vec<AdfCase> =
        serde_json::from_str(include_str!("fixtures/adf_reference.json")).unwrap();
    let worst = cases
        .iter()
        .map(|c| (adf_test_fixed_lag(&c.series, c.lag).unwrap().statistic - c.statistic).abs())
        .fold(0.0, f64::max);
    outcome(
        white >= 90 && walk <= 20 && cases.len() == 50 && worst <= 1e-6,
        format!(
            "white-noise rejections {white}/100, random-walk rejections {walk}/100, \
             fixed-lag max |Δstat| {worst:.1e} over {} reference series",
            cases.len()
        ),
    )
}

/// Every file below `dir` except the wall-clock log.
fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.json" {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&SynthConfig {
        length: 200,
        n_samples: 6,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        seed: 21,
        ..TrainConfig::default()
    };
    let (train, val) = split_samples(data.len(), tcfg.validation_fraction, tcfg.seed);
    let mut checkpoints = Vec::new();
    for run in ["a", "b"] {
        let path = tmp.path().join(format!("{run}.json"));
        let ck = train_tnc_with(
            &data,
            &EncoderConfig::synthetic(),
            &tcfg,
            &train,
            &val,
            None,
            |ck| save_checkpoint(ck, &path),
        )
        .unwrap();
        checkpoints.push((
            std::fs::read(&path).unwrap(),
            serde_json::to_vec(&ck.report).unwrap(),
        ));
    }
    let training_identical = checkpoints[0] == checkpoints[1];

    let mut spec = ExperimentSpec::new(
        DataSource::Synthetic(SynthConfig {
            length: 200,
            n_samples: 5,
            ..SynthConfig::default()
        }),
        Method::ALL.to_vec(),
    );
    spec.n_splits = 2;
    spec.seed = 8;
    spec.train.epochs = 2;
    let mut trees = Vec::new();
    for run in ["x", "y"] {
        let dir = tmp.path().join(run);
        run_experiment(&ExperimentSpec {
            output_dir: Some(dir.clone()),
            ..spec.clone()
        })
        .unwrap();
        let files = files_under(&dir);
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(dir.join(f)).unwrap())
            .collect();
        trees.push((files, bytes));
    }
    // `spec.json` records the output directory itself, so compare it with that field removed.
    let strip = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v.as_object_mut().unwrap().remove("output_dir");
        v
    };
    let same_files = trees[0].0 == trees[1].0;
    let mut differing = Vec::new();
    for (i, f) in trees[0].0.iter().enumerate() {
        let (a, b) = (&trees[0].1[i], &trees[1].1[i]);
        let equal = if f == Path::new("spec.json") {
            strip(a) == strip(b)
        } else {
            a == b
        };
        if !equal {
            differing.push(f.display().to_string());
        }
    }
    outcome(
        training_identical && same_files && differing.is_empty(),
        format!(
            "checkpoint + report identical: {training_identical}; experiment trees: {} files, differing {differing:?}",
            trees[0].0.len()
        ),
    )
}

fn benchmark_spec(r: f64, methods: Vec<Method>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        DataSource::Synthetic(SynthConfig {
            r,
            ..SynthConfig::default()
        }),
        methods,
    );
    spec.train = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    spec
}

fn means(report: &ComparisonReport, m: Method) -> (f64, f64) {
    let s = report.summary(m).unwrap();
    (s.accuracy.mean, s.auprc.mean)
}

fn directional_benchmark(low_r: &ComparisonReport, elapsed_low: Duration) -> Outcome {
    let start = Instant::now();
    let (g_acc, g_auprc) = means(low_r, Method::Graphtnc);
    let (_, t_auprc) = means(low_r, Method::Tnc);
    let mut pass = g_auprc > t_auprc && g_acc >= 0.65;
    let mut detail =
        format!("r=0.1: GraphTNC acc {g_acc:.3} AUPRC {g_auprc:.3} vs TNC AUPRC {t_auprc:.3}");
    for r in [0.5, 0.9] {
        let report =
            run_experiment(&benchmark_spec(r, vec![Method::Graphtnc, Method::Tnc])).unwrap();
        let (_, g) = means(&report, Method::Graphtnc);
        let (_, t) = means(&report, Method::Tnc);
        pass &= g >= t;
        detail.push_str(&format!("; r={r}: AUPRC {g:.3} vs {t:.3}"));
    }
    let total = elapsed_low + start.elapsed();
    pass &= total < Duration::from_secs(45 * 60);
    detail.push_str(&format!("; {:.1} min", total.as_secs_f64() / 60.0));
    outcome(pass, detail)
}

fn non_contrastive(low_r: &ComparisonReport) -> Outcome {
    let (g, _) = means(low_r, Method::Graphtnc);
    let (b, _) = means(low_r, Method::Byol);
    let (s, _) = means(low_r, Method::Simsiam);
    outcome(
        g >= b && g >= s,
        format!("mean accuracy GraphTNC {g:.3}, BYOL {b:.3}, SimSiam {s:.3}"),
    )
}

fn main() {
    let quick = std::env::var("ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut failed = BTreeSet::new();
    let mut report = |id: u32, name: &str, o: Outcome| {
        println!(
            "{} [{id}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.insert(id);
        }
    };
    report(1, "parameter reconciliation", parameter_counts());
    report(2, "loss identity", loss_identity());
    report(3, "gradient suite", gradient_suite());
    report(5, "statistical oracles", statistical_oracles());
    report(6, "ADF behavior", adf_behavior());
    report(8, "determinism", determinism());
    if quick {
        println!("SKIP [4] directional benchmark");
        println!("SKIP [7] non-contrastive sanity");
    } else {
        let start = Instant::now();
        let low_r = run_experiment(&benchmark_spec(
            0.1,
            vec![Method::Graphtnc, Method::Tnc, Method::Byol, Method::Simsiam],
        ))
        .unwrap();
        let elapsed = start.elapsed();
        report(
            4,
            "directional benchmark",
            directional_benchmark(&low_r, elapsed),
        );
        report(7, "non-contrastive sanity", non_contrastive(&low_r));
    }
    let expected: BTreeSet<u32> = EXPECTED_FAILURES.iter().copied().collect();
    if failed != expected {
        eprintln!(
            "acceptance outcome differs from the expected failures {expected:?}: failed {failed:?}"
        );
        std::process::exit(1);
    }
    println!("failing criteria: {failed:?} (expected {expected:?})");
}
